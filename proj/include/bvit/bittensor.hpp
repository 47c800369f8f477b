#pragma once

// Bit-packed +-1 matrices and popcount GEMM.
//
// Layout: row-major, 64 signs per word. Element (r, c) lives in bit (c % 64)
// of word (c / 64) of row r. Bit 1 encodes +1, bit 0 encodes -1. Pad bits past
// `cols` in the last word of each row are always zero.

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bvit/errors.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

using IntMatrix = Tensor<std::int32_t>;

class BitMatrix {
 public:
  static constexpr std::size_t kWordBits = 64;

  BitMatrix() = default;

  /// All elements start at -1 (bit 0).
  BitMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), wpr_(words_for(cols)), words_(rows * wpr_, 0) {}

  static std::size_t words_for(std::size_t cols) { return (cols + kWordBits - 1) / kWordBits; }

  /// Adopts a raw word buffer; rejects buffers of the wrong size or with pad bits set.
  static BitMatrix from_words(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> words) {
    BitMatrix m(rows, cols);
    if (words.size() != m.words_.size())
      throw ShapeError("BitMatrix::from_words: expected " + std::to_string(m.words_.size()) + " words, got " +
                       std::to_string(words.size()));
    m.words_ = std::move(words);
    const std::uint64_t pad = ~m.last_word_mask();
    if (pad != 0 && m.wpr_ > 0) {
      for (std::size_t r = 0; r < rows; ++r)
        if (m.words_[r * m.wpr_ + m.wpr_ - 1] & pad) throw ShapeError("BitMatrix::from_words: pad bits set in row " + std::to_string(r));
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t words_per_row() const noexcept { return wpr_; }

  std::span<const std::uint64_t> row_words(std::size_t r) const { return {words_.data() + r * wpr_, wpr_}; }
  std::span<std::uint64_t> row_words(std::size_t r) { return {words_.data() + r * wpr_, wpr_}; }
  const std::vector<std::uint64_t>& words() const noexcept { return words_; }

  bool bit(std::size_t r, std::size_t c) const { return (words_[r * wpr_ + c / kWordBits] >> (c % kWordBits)) & 1u; }

  void set(std::size_t r, std::size_t c, bool positive) {
    std::uint64_t& w = words_[r * wpr_ + c / kWordBits];
    const std::uint64_t m = std::uint64_t{1} << (c % kWordBits);
    w = positive ? (w | m) : (w & ~m);
  }

  int sign(std::size_t r, std::size_t c) const { return bit(r, c) ? 1 : -1; }

  /// Mask of valid bits in the last word of a row.
  std::uint64_t last_word_mask() const noexcept {
    const std::size_t rem = cols_ % kWordBits;
    return rem == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << rem) - 1;
  }

  BitMatrix transposed() const {
    BitMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c)
        if (bit(r, c)) t.set(c, r, true);
    return t;
  }

  friend bool operator==(const BitMatrix& a, const BitMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.words_ == b.words_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t wpr_ = 0;
  std::vector<std::uint64_t> words_;
};

/// bit(r, c) = 1 iff x(r, c) >= 0; sign(0) is +1.
template <class T>
BitMatrix pack_signs(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("pack_signs: expected a 2-D tensor, got " + shape_str(x.shape()));
  BitMatrix m(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto words = m.row_words(r);
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c)
      if (row[c] >= T{}) words[c / 64] |= std::uint64_t{1} << (c % 64);
  }
  return m;
}

/// Packs the sub-block x[row0:row0+nrows, col0:col0+ncols].
template <class T>
BitMatrix pack_signs_block(const Tensor<T>& x, std::size_t row0, std::size_t nrows, std::size_t col0,
                           std::size_t ncols) {
  if (row0 + nrows > x.rows() || col0 + ncols > x.cols()) throw ShapeError("pack_signs_block: out of range");
  BitMatrix m(nrows, ncols);
  for (std::size_t r = 0; r < nrows; ++r) {
    auto words = m.row_words(r);
    const T* src = &x(row0 + r, col0);
    for (std::size_t c = 0; c < ncols; ++c)
      if (src[c] >= T{}) words[c / 64] |= std::uint64_t{1} << (c % 64);
  }
  return m;
}

/// Expands to a dense +-1 tensor.
template <class T>
Tensor<T> unpack(const BitMatrix& m) {
  Tensor<T> out = Tensor<T>::matrix(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m.bit(r, c) ? T{1} : T{-1};
  return out;
}

/// out(i, j) = sum_p a(i, p) * bt(j, p) over +-1 values, for a (m x k) and a
/// pre-transposed right operand bt (n x k).
///
/// Per word, the number of disagreeing signs is popcount(a ^ b); with d total
/// disagreements the dot product is k - 2d = 2 * popcount(XNOR) - k. Pad bits
/// are zero in both operands so they never disagree.
inline IntMatrix binary_gemm_nt(const BitMatrix& a, const BitMatrix& bt) {
  if (a.cols() != bt.cols())
    throw ShapeError("binary_gemm: inner dims differ (" + std::to_string(a.cols()) + " vs " + std::to_string(bt.cols()) + ")");
  const std::size_t m = a.rows(), n = bt.rows(), wpr = a.words_per_row();
  const auto k = static_cast<std::int32_t>(a.cols());
  IntMatrix out = IntMatrix::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint64_t* ai = a.row_words(i).data();
    std::int32_t* oi = &out(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint64_t* bj = bt.row_words(j).data();
      std::int32_t diff = 0;
      for (std::size_t w = 0; w < wpr; ++w) diff += std::popcount(ai[w] ^ bj[w]);
      oi[j] = k - 2 * diff;
    }
  }
  return out;
}

/// Integer +-1 GEMM of a (m x k) by b (k x n). b is transposed internally so
/// both operands stream row-major.
inline IntMatrix binary_gemm(const BitMatrix& a, const BitMatrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("binary_gemm: a is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + ", b is " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  return binary_gemm_nt(a, b.transposed());
}

/// out(i, j) = sum_p mask(i, p) * v(p, j) where mask bits are {0, 1} and v is
/// +-1, given vt = v^T (n x k). Used for quantized-attention-probability times
/// sign-value products: with s = popcount(mask & v+), t = popcount(mask), the
/// sum is s - (t - s).
inline IntMatrix masked_pm1_gemm(const BitMatrix& mask, const BitMatrix& vt) {
  if (mask.cols() != vt.cols())
    throw ShapeError("masked_pm1_gemm: inner dims differ (" + std::to_string(mask.cols()) + " vs " +
                     std::to_string(vt.cols()) + ")");
  const std::size_t m = mask.rows(), n = vt.rows(), wpr = mask.words_per_row();
  IntMatrix out = IntMatrix::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint64_t* mi = mask.row_words(i).data();
    std::int32_t total = 0;
    for (std::size_t w = 0; w < wpr; ++w) total += std::popcount(mi[w]);
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint64_t* vj = vt.row_words(j).data();
      std::int32_t pos = 0;
      for (std::size_t w = 0; w < wpr; ++w) pos += std::popcount(mi[w] & vj[w]);
      out(i, j) = 2 * pos - total;
    }
  }
  return out;
}

namespace reference {

/// Naive oracle: integer GEMM of elementwise signs (sign(0) = +1) of real
/// matrices, never touching the packed representation.
template <class T>
IntMatrix sign_gemm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) throw ShapeError("reference::sign_gemm: inner dims differ");
  IntMatrix out = IntMatrix::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      std::int32_t s = 0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += (a(i, p) >= T{} ? 1 : -1) * (b(p, j) >= T{} ? 1 : -1);
      out(i, j) = s;
    }
  return out;
}

}  // namespace reference

}  // namespace bvit
