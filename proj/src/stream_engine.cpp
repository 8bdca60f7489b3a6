#include <fmt/format.h>

#include "cotwatch/error.hpp"
#include "cotwatch/stream_engine.hpp"

namespace cotwatch {

std::string_view to_string(StreamEventKind k) {
  switch (k) {
    case StreamEventKind::score: return "score";
    case StreamEventKind::alarm_raised: return "alarm_raised";
    case StreamEventKind::alarm_cleared: return "alarm_cleared";
  }
  return "unknown";
}

StreamDetector::StreamDetector(std::shared_ptr<const ProbeModel> step_probe,
                               std::shared_ptr<const ProbeModel> prefix_probe)
    : step_(std::move(step_probe)), prefix_(std::move(prefix_probe)) {
  if (!step_ || !prefix_) throw Error(ErrorCode::IncompatibleProbe, "stream needs both probes");
  check_compatible(*step_, *prefix_);
  if (step_->aggregation.is_global()) acc_.emplace(step_->aggregation, step_->state_dim);
}

std::vector<StreamEvent> StreamDetector::push_step(const Step& step) {
  check_invariants(step, step_->state_dim);
  const std::size_t t = steps_ + 1;
  std::vector<double> x;
  if (acc_) {
    GlobalAccumulator next = *acc_;
    next.push(step);
    x = next.representation(t).vector;
    *acc_ = std::move(next);
  } else {
    x = aggregate_step(step, step_->aggregation).vector;
  }
  const double cs = step_->forward(x);
  x.push_back(cs);
  const double cp = prefix_->forward(x);
  const bool decision = cp > prefix_->threshold;

  std::vector<StreamEvent> events{{StreamEventKind::score, t, cs, cp, decision}};
  const bool previous = last_decision_.value_or(false);
  if (decision != previous) {
    events.push_back({decision ? StreamEventKind::alarm_raised : StreamEventKind::alarm_cleared, t, cs, cp, decision});
  }
  steps_ = t;
  tokens_ += step.num_tokens();
  last_c_prefix_ = cp;
  last_decision_ = decision;
  return events;
}

StreamVerdict StreamDetector::finalize() const {
  if (steps_ == 0) throw Error(ErrorCode::NoSteps, "stream ended before any step");
  return {steps_, last_c_prefix_, *last_decision_};
}

}  // namespace cotwatch
