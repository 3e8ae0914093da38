#pragma once

#include "streamlod/decoder.hpp"
#include "streamlod/image.hpp"
#include "streamlod/lod.hpp"
#include "streamlod/rasterizer.hpp"

#include <map>
#include <ostream>
#include <span>
#include <vector>

namespace streamlod {

/// Per-anchor running sums of screen-gradient magnitude over a window.
class GradientLedger {
 public:
  explicit GradientLedger(int window = 30) : window_(window) {}

  void add(AnchorId id, double value);
  void reset() { entries_.clear(); }

  int window() const { return window_; }
  bool contains(AnchorId id) const { return entries_.contains(id); }
  /// Mean over recorded samples; throws std::out_of_range when never recorded.
  double mean(AnchorId id) const;
  std::int64_t count(AnchorId id) const;
  std::vector<AnchorId> ids() const;
  std::vector<double> means() const;  // in id order
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    double sum = 0.0;
    std::int64_t count = 0;
  };
  int window_;
  std::map<AnchorId, Entry> entries_;
};

struct TrainingView {
  Camera camera;
  Image image;
};

/// Probes dL/dmean2d of the squared error between the current frame and the
/// model render, per Gaussian, and aggregates to anchors (mean over K). The
/// model is frozen, so each view's contribution is computed once and reused for
/// every iteration of the round-robin window.
GradientLedger accumulate_motion_gradients(const LoDHierarchy& h, const GaussianDecoder& decoder,
                                           std::span<const TrainingView> views,
                                           const RenderSettings& settings, int window);

/// Two-component univariate mixture, canonicalized so that means[0] <= means[1].
struct Gmm2 {
  double weights[2] = {0.5, 0.5};
  double means[2] = {0.0, 0.0};
  double variances[2] = {1.0, 1.0};
  bool degenerate = false;  // fewer than two distinct values: no motion signal
  int iterations = 0;
  std::vector<double> log_likelihood_trace;

  /// Posterior of the higher-mean component at v.
  double posterior_high(double v) const;
  double log_likelihood(std::span<const double> values) const;
};

struct GmmOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;
  double variance_floor_ratio = 1e-12;  // relative to the data variance
};

Gmm2 fit_gmm(std::span<const double> values, const GmmOptions& opts = {});

struct Partition {
  std::vector<AnchorId> dynamic_ids;
  std::vector<AnchorId> static_ids;
  std::map<AnchorId, double> posterior;
  std::map<AnchorId, double> grad_mean;
};

/// Dynamic iff posterior of the higher-mean component exceeds rho. Anchors
/// missing from the ledger are static.
Partition classify_dynamic(const Gmm2& gmm, const GradientLedger& ledger, std::span<const AnchorId> anchors,
                           double rho);

/// Writes anchor states from the partition.
void apply_partition(LoDHierarchy& h, const Partition& p);

/// Diagnostic dump, one "anchor_id,state,grad_mean,posterior" line per anchor.
void write_partition(std::ostream& os, const Partition& p);

}  // namespace streamlod
