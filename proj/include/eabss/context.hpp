#pragma once

#include <deque>
#include <vector>

#include "eabss/gateway.hpp"

namespace eabss {

/// The visible conversation under a word budget. Old turns fall off the
/// front as new ones arrive, mimicking a chat model's apparent forgetting.
class ConversationContext {
 public:
  explicit ConversationContext(std::size_t budget_words = 3000) : budget_(budget_words) {}

  /// Appends a turn and evicts from the front; returns the transcript
  /// indices of the evicted turns.
  std::vector<std::size_t> push(gateway::ChatTurn turn) {
    total_ += turn.word_count;
    turns_.push_back(std::move(turn));
    return evict();
  }

  /// Drops oldest turns while over budget. A lone turn larger than the whole
  /// budget stays and is flagged oversize.
  std::vector<std::size_t> evict() {
    std::vector<std::size_t> gone;
    while (total_ > budget_ && turns_.size() > 1) {
      total_ -= turns_.front().word_count;
      gone.push_back(turns_.front().index);
      turns_.pop_front();
      ++evicted_;
    }
    oversize_ = total_ > budget_;
    return gone;
  }

  void set_budget(std::size_t words) {
    budget_ = words;
    evict();
  }

  const std::deque<gateway::ChatTurn>& turns() const { return turns_; }
  std::vector<gateway::ChatTurn> snapshot() const { return {turns_.begin(), turns_.end()}; }
  std::size_t budget_words() const { return budget_; }
  std::size_t total_words() const { return total_; }
  std::size_t evicted_count() const { return evicted_; }
  bool oversize_turn() const { return oversize_; }
  bool empty() const { return turns_.empty(); }

  bool contains_text(std::string_view needle) const {
    for (const auto& t : turns_)
      if (t.text.find(needle) != std::string::npos) return true;
    return false;
  }

 private:
  std::deque<gateway::ChatTurn> turns_;
  std::size_t budget_;
  std::size_t total_ = 0;
  std::size_t evicted_ = 0;
  bool oversize_ = false;
};

}  // namespace eabss
