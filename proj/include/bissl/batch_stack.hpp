#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "bissl/errors.hpp"
#include "bissl/rng.hpp"

namespace bissl {

/// Without-replacement batch queue over sample indices [0, n).
///
/// A permutation is cut into floor(n / batch_size) batches (the remainder is
/// dropped for that pass). `next(k)` returns k batches. When a pass holds at
/// least k batches, the stack is reshuffled only if fewer than k batches remain
/// before a draw, so the k batches of one draw never straddle two permutations.
/// When a pass holds fewer than k batches, the check is made per batch instead:
/// reshuffle whenever fewer than batch_size samples remain.
class BatchStack {
 public:
  BatchStack() = default;

  BatchStack(std::size_t num_samples, std::size_t batch_size, std::uint64_t seed)
      : n_(num_samples), batch_size_(batch_size), rng_(seed) {
    if (batch_size_ == 0) throw ConfigError("batch stack: batch size must be positive");
    if (n_ < batch_size_) {
      throw ConfigError("batch stack: " + std::to_string(n_) + " samples cannot fill one batch of " +
                        std::to_string(batch_size_));
    }
    order_ = rng_.permutation(n_);
  }

  std::size_t num_samples() const { return n_; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t batches_per_pass() const { return n_ / batch_size_; }
  std::size_t remaining_batches() const { return (n_ - cursor_) / batch_size_; }
  std::size_t draws() const { return draws_; }

  /// 1-based draw numbers before which a reshuffle happened (the initial
  /// permutation is not counted).
  const std::vector<std::size_t>& reshuffle_draws() const { return reshuffle_draws_; }

  std::vector<std::vector<std::size_t>> next(std::size_t k) {
    if (k == 0) throw ConfigError("batch stack: must draw at least one batch");
    ++draws_;
    std::vector<std::vector<std::size_t>> out;
    out.reserve(k);
    const bool whole_draw = batches_per_pass() >= k;
    if (whole_draw && remaining_batches() < k) reshuffle();
    for (std::size_t b = 0; b < k; ++b) {
      if (remaining_batches() == 0) reshuffle();
      auto first = order_.begin() + static_cast<std::ptrdiff_t>(cursor_);
      out.emplace_back(first, first + static_cast<std::ptrdiff_t>(batch_size_));
      cursor_ += batch_size_;
    }
    return out;
  }

  std::string state() const {
    std::ostringstream os;
    os << n_ << ' ' << batch_size_ << ' ' << cursor_ << ' ' << draws_ << ' ' << reshuffle_draws_.size();
    for (auto d : reshuffle_draws_) os << ' ' << d;
    for (auto i : order_) os << ' ' << i;
    os << '\n' << rng_.state();
    return os.str();
  }

  static BatchStack from_state(const std::string& s) {
    std::istringstream is(s);
    BatchStack st;
    std::size_t nres = 0;
    is >> st.n_ >> st.batch_size_ >> st.cursor_ >> st.draws_ >> nres;
    st.reshuffle_draws_.resize(nres);
    for (auto& d : st.reshuffle_draws_) is >> d;
    st.order_.resize(st.n_);
    for (auto& i : st.order_) is >> i;
    if (is.fail()) throw ConfigError("batch stack: malformed state");
    std::string rest;
    std::getline(is, rest);
    std::getline(is, rest, '\0');
    st.rng_.set_state(rest);
    return st;
  }

  friend bool operator==(const BatchStack& a, const BatchStack& b) { return a.state() == b.state(); }

 private:
  void reshuffle() {
    order_ = rng_.permutation(n_);
    cursor_ = 0;
    if (reshuffle_draws_.empty() || reshuffle_draws_.back() != draws_) reshuffle_draws_.push_back(draws_);
  }

  std::size_t n_ = 0;
  std::size_t batch_size_ = 1;
  std::size_t cursor_ = 0;
  std::size_t draws_ = 0;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> reshuffle_draws_;
};

}  // namespace bissl
