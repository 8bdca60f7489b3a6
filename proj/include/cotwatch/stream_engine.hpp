#pragma once
// Online detector: one step in, scores and alarm transitions out.
//
// Global schemes keep O(d) running sums; step-scoped schemes keep no
// cross-step state. Per-step scores match offline inference bitwise except
// for global_exp, whose rescaled sums agree to rounding.

#include <cstddef>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "cotwatch/aggregation.hpp"
#include "cotwatch/probe.hpp"
#include "cotwatch/trajectory.hpp"

namespace cotwatch {

enum class StreamEventKind { score, alarm_raised, alarm_cleared };
std::string_view to_string(StreamEventKind k);

struct StreamEvent {
  StreamEventKind kind = StreamEventKind::score;
  std::size_t step_index = 0;  // 1-based
  double c_step = 0.0;
  double c_prefix = 0.0;
  bool decision = false;
};

struct StreamVerdict {
  std::size_t steps = 0;
  double c_prefix = 0.0;
  bool decision = false;
};

class StreamDetector {
 public:
  /// Throws IncompatibleProbe when the pair does not belong together.
  StreamDetector(std::shared_ptr<const ProbeModel> step_probe, std::shared_ptr<const ProbeModel> prefix_probe);

  /// Throws DimMismatch / EmptyStep; the state is unchanged on error.
  std::vector<StreamEvent> push_step(const Step& step);
  /// Throws NoSteps before the first step.
  StreamVerdict finalize() const;

  std::size_t steps_seen() const noexcept { return steps_; }
  std::size_t tokens_seen() const noexcept { return tokens_; }
  std::optional<bool> last_decision() const noexcept { return last_decision_; }
  const GlobalAccumulator* accumulator() const noexcept { return acc_ ? &*acc_ : nullptr; }
  const AggregationScheme& scheme() const noexcept { return step_->aggregation; }

 private:
  std::shared_ptr<const ProbeModel> step_;
  std::shared_ptr<const ProbeModel> prefix_;
  std::optional<GlobalAccumulator> acc_;
  std::size_t steps_ = 0;
  std::size_t tokens_ = 0;
  double last_c_prefix_ = 0.0;
  std::optional<bool> last_decision_;
};

}  // namespace cotwatch
