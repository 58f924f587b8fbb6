#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

#include "resil/error.hpp"
#include "resil/observation.hpp"
#include "resil/random.hpp"

namespace resil {

/// Experience tuple from one agent's point of view.
struct Transition {
  ObservationKey obs;
  int action = 0;
  ObservationKey next_obs;
  double reward = 0.0;
  bool done = false;
  std::uint64_t t = 0;
  StateId state{};
  StateId next_state{};
  int agent = 0;

  friend bool operator==(const Transition&, const Transition&) = default;
};

/// Complete binary tree of sums over leaf weights. Parents are always
/// recomputed from their children, so rounding error does not accumulate.
class SumTree {
 public:
  explicit SumTree(std::size_t leaves = 1) { reset(leaves); }

  void reset(std::size_t leaves) {
    size_ = 1;
    while (size_ < leaves) size_ *= 2;
    nodes_.assign(2 * size_, 0.0);
  }

  void set(std::size_t leaf, double w) {
    std::size_t i = leaf + size_;
    nodes_[i] = w;
    for (i /= 2; i >= 1; i /= 2) nodes_[i] = nodes_[2 * i] + nodes_[2 * i + 1];
  }

  double total() const { return nodes_[1]; }
  double weight(std::size_t leaf) const { return nodes_[leaf + size_]; }

  /// Leaf whose cumulative range contains `u` in [0, total).
  std::size_t find(double u) const {
    std::size_t i = 1;
    while (i < size_) {
      const double left = nodes_[2 * i];
      if (u < left || nodes_[2 * i + 1] <= 0.0) {
        i = 2 * i;
      } else {
        u -= left;
        i = 2 * i + 1;
      }
    }
    return i - size_;
  }

 private:
  std::size_t size_ = 1;
  std::vector<double> nodes_;
};

struct Batch {
  std::vector<std::size_t> slots;
  std::vector<Transition> items;
};

/**
 * @brief Ring buffer of transitions sampled in proportion to
 * (priority + 1e-3)^alpha, with replacement.
 */
class ReplayBuffer {
 public:
  static constexpr double kPriorityFloor = 1e-3;

  ReplayBuffer(std::size_t capacity = 1, double alpha = 0.6) : capacity_(capacity), alpha_(alpha), tree_(capacity) {
    if (capacity_ == 0) throw ConfigError("replay buffer capacity must be positive");
    entries_.reserve(std::min<std::size_t>(capacity_, 4096));
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  double alpha() const { return alpha_; }
  bool empty() const { return entries_.empty(); }
  std::uint64_t pushes() const { return pushes_; }

  const Transition& at(std::size_t slot) const { return entries_.at(slot); }
  double priority(std::size_t slot) const { return priorities_.at(slot); }

  /// Stores `tau`, evicting the oldest entry once full. Returns its slot.
  std::size_t push(const Transition& tau, double priority) {
    if (!(priority >= 0.0) || !std::isfinite(priority)) throw ModelError("priority must be finite and >= 0");
    std::size_t slot;
    if (entries_.size() < capacity_) {
      slot = entries_.size();
      entries_.push_back(tau);
      priorities_.push_back(priority);
    } else {
      slot = next_;
      entries_[slot] = tau;
      priorities_[slot] = priority;
    }
    next_ = (slot + 1) % capacity_;
    ++pushes_;
    tree_.set(slot, weight_of(priority));
    return slot;
  }

  void set_priority(std::size_t slot, double priority) {
    if (!(priority >= 0.0) || !std::isfinite(priority)) throw ModelError("priority must be finite and >= 0");
    priorities_.at(slot) = priority;
    tree_.set(slot, weight_of(priority));
  }

  /// Probability that a single draw returns `slot`.
  double probability(std::size_t slot) const { return tree_.weight(slot) / tree_.total(); }

  Batch sample(std::size_t n, Rng& rng) const {
    if (entries_.empty()) throw ModelError("cannot sample from an empty replay buffer");
    Batch b;
    b.slots.reserve(n);
    b.items.reserve(n);
    const double total = tree_.total();
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t slot = tree_.find(uniform01(rng) * total);
      if (slot >= entries_.size()) slot = entries_.size() - 1;
      b.slots.push_back(slot);
      b.items.push_back(entries_[slot]);
    }
    return b;
  }

  /// Order-stable digest of contents and priorities.
  std::uint64_t digest() const {
    std::uint64_t h = splitmix64(entries_.size() ^ (pushes_ << 20));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const Transition& e = entries_[i];
      h = splitmix64(h ^ e.obs.local ^ (e.obs.message << 17) ^ static_cast<std::uint64_t>(e.action) ^ e.t);
      std::uint64_t bits;
      std::memcpy(&bits, &priorities_[i], sizeof bits);
      h = splitmix64(h ^ bits);
    }
    return h;
  }

 private:
  double weight_of(double priority) const { return std::pow(priority + kPriorityFloor, alpha_); }

  std::size_t capacity_;
  double alpha_;
  std::vector<Transition> entries_;
  std::vector<double> priorities_;
  std::size_t next_ = 0;
  std::uint64_t pushes_ = 0;
  SumTree tree_;
};

}  // namespace resil
