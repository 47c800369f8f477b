#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "bvit/serialize.hpp"

using namespace bvit;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.name = "small";
  c.img_size = 16;
  c.num_classes = 4;
  c.stages = {{8, 2, 2, 2, 1, 4}, {16, 1, 2, 2, 1, 2}};
  return c;
}

FloatTensor random_images(std::size_t b, const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  FloatTensor x({b, cfg.img_size, cfg.img_size, cfg.in_channels});
  for (auto& v : x.values()) v = nd(rng);
  return x;
}

// A trained-looking model: non-default BN statistics and per-channel parameters.
Model<float> perturbed_model(const ModelConfig& cfg) {
  auto m = build_model<float>(cfg, 21);
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  struct V {
    std::mt19937_64& rng;
    std::uniform_real_distribution<float>& u;
    void param(const std::string& n, Param<float>& p) {
      if (n.ends_with(".bias") || n.ends_with(".zeta") || n.ends_with("beta"))
        for (auto& v : p.value.values()) v = u(rng) - 1.0f;
    }
    void buffer(const std::string& n, FloatTensor& t) {
      for (auto& v : t.values()) v = n.ends_with("running_var") ? u(rng) : u(rng) - 1.0f;
    }
    void binary(const std::string&, BiFC<float>&) {}
  } v{rng, u};
  m.visit(v);
  return m;
}

std::string saved(const Model<float>& m) {
  std::ostringstream os;
  save_weights(m, os);
  return os.str();
}

FormatError::Kind load_error(const std::string& bytes) {
  std::istringstream is(bytes);
  try {
    load_weights<float>(is);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "load succeeded";
  return FormatError::Kind::io;
}

// Offset of the first tensor record in a container.
std::size_t tensor_section_offset(const std::string& bytes) {
  std::uint32_t cfg_len;
  std::memcpy(&cfg_len, bytes.data() + 8, 4);
  return 12 + cfg_len + 4;
}

}  // namespace

TEST(Serialize, RoundTripGivesBitwiseIdenticalLogits) {
  const auto cfg = small_config();
  const auto m = perturbed_model(cfg);
  const FloatTensor x = random_images(3, cfg, 23);
  const std::string bytes = saved(m);
  std::istringstream is(bytes);
  const auto loaded = load_weights<float>(is);
  EXPECT_EQ(loaded.config(), cfg);
  EXPECT_EQ(loaded.forward(x, Ctx<float>{}), m.forward(x, Ctx<float>{}));
  EXPECT_EQ(saved(loaded), bytes);
}

TEST(Serialize, RoundTripThroughFile) {
  const auto cfg = presets::tiny_pyramid();
  const auto m = build_model<float>(cfg, 24);
  const std::string path = ::testing::TempDir() + "/bvit_roundtrip.bin";
  save_weights(m, path);
  const auto loaded = load_weights<float>(path);
  const FloatTensor x = random_images(2, cfg, 25);
  EXPECT_EQ(loaded.forward(x, Ctx<float>{}), m.forward(x, Ctx<float>{}));
  EXPECT_THROW(load_weights<float>(::testing::TempDir() + "/does_not_exist.bin"), FormatError);
}

TEST(Serialize, HeaderLayout) {
  const std::string bytes = saved(build_model<float>(small_config(), 1));
  EXPECT_EQ(bytes.substr(0, 4), "BVIT");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  EXPECT_EQ(version, 1u);
  std::uint32_t cfg_len;
  std::memcpy(&cfg_len, bytes.data() + 8, 4);
  EXPECT_EQ(parse_config(bytes.substr(12, cfg_len)), small_config());
}

TEST(Serialize, PackedTensorPayloadSize) {
  BiFC<float> f(512, 2048);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> nd;
  FloatTensor w({512, 2048});
  for (auto& v : w.values()) v = nd(rng);
  f.set_latent(w);
  StoredTensor t;
  t.dtype = DType::packed_u64;
  t.dims = {512, 2048};
  t.bits = f.binary_weight().bits.words();
  std::ostringstream os;
  detail::write_tensor(os, "x.w_bits", t);
  EXPECT_EQ(os.str().size(), 512u * 2048u / 8u + 2 + 8 + 1 + 1 + 16);
}

TEST(Serialize, CorruptMagicIsRejected) {
  std::string bytes = saved(build_model<float>(small_config(), 1));
  bytes[0] = 'X';
  EXPECT_EQ(load_error(bytes), FormatError::Kind::bad_magic);
}

TEST(Serialize, WrongVersionIsRejected) {
  std::string bytes = saved(build_model<float>(small_config(), 1));
  bytes[4] = 2;
  EXPECT_EQ(load_error(bytes), FormatError::Kind::bad_version);
}

TEST(Serialize, TruncationIsRejectedAtEveryPrefix) {
  const std::string bytes = saved(build_model<float>(small_config(), 1));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_EQ(load_error(bytes.substr(0, cut)), FormatError::Kind::truncated) << cut;
}

TEST(Serialize, UnknownAndMissingTensors) {
  const std::string bytes = saved(build_model<float>(small_config(), 1));
  std::uint32_t count;
  const std::size_t count_at = tensor_section_offset(bytes) - 4;
  std::memcpy(&count, bytes.data() + count_at, 4);

  std::string extra = bytes;
  const std::uint32_t more = count + 1;
  std::memcpy(extra.data() + count_at, &more, 4);
  std::ostringstream os;
  StoredTensor t;
  t.dims = {1};
  t.f32 = {0.0f};
  detail::write_tensor(os, "stage9.bogus", t);
  extra += os.str();
  EXPECT_EQ(load_error(extra), FormatError::Kind::unknown_tensor);

  // Dropping the last record leaves the head bias missing.
  std::string fewer = bytes.substr(0, bytes.size() - (2 + 9 + 1 + 1 + 8 + 4 * 4));
  const std::uint32_t less = count - 1;
  std::memcpy(fewer.data() + count_at, &less, 4);
  EXPECT_EQ(load_error(fewer), FormatError::Kind::missing_tensor);
}

TEST(Serialize, PadBitsAndShapeMismatchAreBadTensors) {
  const auto cfg = small_config();
  auto m = build_model<float>(cfg, 1);
  std::string bytes = saved(m);
  // First stage-1 binary weight is the patch embedding: 32 x 16 bits, one word per row.
  const std::string key = "stage1.embed.w_bits";
  const std::size_t at = bytes.find(key);
  ASSERT_NE(at, std::string::npos);
  const std::size_t payload = at + key.size() + 1 + 1 + 16;
  std::string bad = bytes;
  bad[payload + 7] = static_cast<char>(0x80);  // bit 63 of row 0, beyond column 15
  EXPECT_EQ(load_error(bad), FormatError::Kind::bad_tensor);

  std::string shape = bytes;
  const std::uint64_t wrong = 15;
  std::memcpy(shape.data() + at + key.size() + 2 + 8, &wrong, 8);
  EXPECT_EQ(load_error(shape), FormatError::Kind::bad_tensor);
}

TEST(Serialize, InvalidEmbeddedConfigIsRejected) {
  std::string bytes = saved(build_model<float>(small_config(), 1));
  const std::size_t at = bytes.find("img_size = 16");
  ASSERT_NE(at, std::string::npos);
  bytes[at + 11] = '9';  // img_size = 97
  bytes[at + 12] = '7';
  EXPECT_EQ(load_error(bytes), FormatError::Kind::bad_config);
}

TEST(ConfigText, RoundTripsEveryPreset) {
  for (const auto& [name, make] : preset_table()) {
    const ModelConfig c = make();
    EXPECT_EQ(parse_config(to_config_text(c)), c) << name;
    EXPECT_EQ(load_config(name), c);
  }
}

TEST(ConfigText, ErrorsCarryLineNumbers) {
  try {
    parse_config("[model]\nname = x\nimg_size = abc\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("[model]\nfirst_layer_precision = binary\n[stage]\n"), ConfigError);
  EXPECT_THROW(parse_config("dim = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("[stage]\ndim = 4\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.cfg"), FormatError);
}
