#include "streamlod/decoder.hpp"

#include "streamlod/rng.hpp"

#include <algorithm>
#include <cmath>

namespace streamlod {

MlpNet MlpNet::zeros(int in, int hidden, int out) {
  MlpNet n;
  n.w1 = Eigen::MatrixXd::Zero(hidden, in);
  n.b1 = Eigen::VectorXd::Zero(hidden);
  n.w2 = Eigen::MatrixXd::Zero(out, hidden);
  n.b2 = Eigen::VectorXd::Zero(out);
  return n;
}

void MlpNet::set_zero() {
  w1.setZero();
  b1.setZero();
  w2.setZero();
  b2.setZero();
}

std::vector<int> GaussianDecoder::head_widths(int k, DecoderLayout layout) {
  if (layout == DecoderLayout::Shared) return {k * kAttributesPerGaussian};
  return {k, 3 * k, 3 * k, 4 * k};
}

GaussianDecoder::GaussianDecoder(int k, DecoderLayout layout, std::uint64_t seed) : k_(k), layout_(layout) {
  if (k < 1) throw std::invalid_argument("K must be at least 1");
  SplitMix64 rng(seed);
  for (int width : head_widths(k, layout)) {
    MlpNet n = MlpNet::zeros(kDecoderInputDim, kDecoderHiddenDim, width);
    // Kaiming-uniform, fan-in; biases stay zero.
    const double b1 = std::sqrt(6.0 / kDecoderInputDim);
    const double b2 = std::sqrt(6.0 / kDecoderHiddenDim);
    for (Eigen::Index i = 0; i < n.w1.size(); ++i) n.w1.data()[i] = rng.uniform(-b1, b1);
    for (Eigen::Index i = 0; i < n.w2.size(); ++i) n.w2.data()[i] = rng.uniform(-b2, b2);
    nets_.push_back(std::move(n));
  }
}

GaussianDecoder GaussianDecoder::from_nets(int k, DecoderLayout layout, std::vector<MlpNet> nets) {
  if (k < 1) throw std::invalid_argument("K must be at least 1");
  const auto widths = head_widths(k, layout);
  if (nets.size() != widths.size()) throw std::invalid_argument("decoder net count mismatch");
  for (std::size_t i = 0; i < nets.size(); ++i) {
    const MlpNet& n = nets[i];
    if (n.w1.cols() != kDecoderInputDim || n.w1.rows() != kDecoderHiddenDim || n.b1.size() != kDecoderHiddenDim ||
        n.w2.cols() != kDecoderHiddenDim || n.w2.rows() != widths[i] || n.b2.size() != widths[i])
      throw std::invalid_argument("decoder net shape mismatch");
  }
  GaussianDecoder d;
  d.k_ = k;
  d.layout_ = layout;
  d.nets_ = std::move(nets);
  return d;
}

std::size_t GaussianDecoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& net : nets_) n += net.parameter_count();
  return n;
}

std::vector<MlpNet> GaussianDecoder::zero_grad() const {
  std::vector<MlpNet> g;
  for (const auto& n : nets_) g.push_back(MlpNet::zeros(n.w1.cols(), n.w1.rows(), n.w2.rows()));
  return g;
}

Eigen::VectorXd GaussianDecoder::forward(const Eigen::VectorXd& input,
                                         std::vector<Eigen::VectorXd>* hidden) const {
  Eigen::VectorXd out(output_dim());
  Eigen::Index offset = 0;
  if (hidden) hidden->clear();
  for (const auto& n : nets_) {
    const Eigen::VectorXd pre = n.w1 * input + n.b1;
    const Eigen::VectorXd act = pre.cwiseMax(0.0);
    const Eigen::VectorXd y = n.w2 * act + n.b2;
    out.segment(offset, y.size()) = y;
    offset += y.size();
    if (hidden) hidden->push_back(pre);
  }
  return out;
}

Eigen::VectorXd GaussianDecoder::backward(const Eigen::VectorXd& input,
                                          const std::vector<Eigen::VectorXd>& hidden,
                                          const Eigen::VectorXd& d_output,
                                          std::vector<MlpNet>* grad_nets) const {
  Eigen::VectorXd d_input = Eigen::VectorXd::Zero(input.size());
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i < nets_.size(); ++i) {
    const MlpNet& n = nets_[i];
    const Eigen::VectorXd act = hidden[i].cwiseMax(0.0);
    const Eigen::VectorXd dy = d_output.segment(offset, n.w2.rows());
    offset += n.w2.rows();
    Eigen::VectorXd d_pre = n.w2.transpose() * dy;
    for (Eigen::Index j = 0; j < d_pre.size(); ++j)
      if (!(hidden[i][j] > 0.0)) d_pre[j] = 0.0;
    if (grad_nets) {
      MlpNet& g = (*grad_nets)[i];
      g.w2.noalias() += dy * act.transpose();
      g.b2 += dy;
      g.w1.noalias() += d_pre * input.transpose();
      g.b1 += d_pre;
    }
    d_input.noalias() += n.w1.transpose() * d_pre;
  }
  return d_input;
}

Eigen::VectorXd decoder_input(const Anchor& a, const Camera& cam, double d_max) {
  const Vec3 v = a.center - cam.center();
  const double dist = v.norm();
  if (!(dist > 0.0)) throw std::invalid_argument("non-positive viewing distance");
  Eigen::VectorXd x(kDecoderInputDim);
  x.head(kFeatureDim) = a.feature;
  x[kFeatureDim] = dist / d_max;
  x.segment<3>(kFeatureDim + 1) = v / dist;
  return x;
}

DecodedAnchor decode(const Anchor& anchor, const Camera& cam, const GaussianDecoder& decoder,
                     const LoDConfig& cfg) {
  const int k = decoder.k();
  if (anchor.k() != k) throw std::invalid_argument("anchor K does not match decoder");
  if (anchor.feature.size() != kFeatureDim) throw std::invalid_argument("anchor feature dimension");

  DecodedAnchor out;
  DecodeTape& tape = out.tape;
  tape.anchor_id = anchor.id;
  tape.decoder_version = decoder.version();
  tape.voxel = cfg.voxel_size(anchor.level);
  tape.d_max = cfg.d_max;
  tape.view = anchor.center - cam.center();
  tape.input = decoder_input(anchor, cam, cfg.d_max);
  tape.raw = decoder.forward(tape.input, &tape.hidden);
  if (!tape.raw.allFinite()) throw DecoderDivergence();

  const Eigen::VectorXd& raw = tape.raw;
  out.gaussians.resize(k);
  tape.scales.resize(k, 3);
  for (int i = 0; i < k; ++i) {
    NeuralGaussian& g = out.gaussians[i];
    g.parent_anchor = anchor.id;
    g.level = anchor.level;
    g.id = anchor.id * static_cast<std::uint64_t>(k) + static_cast<std::uint64_t>(i);
    g.mu = anchor.center + anchor.offsets.row(i).transpose() * tape.voxel;
    g.opacity = sigmoid(raw[i]);
    for (int c = 0; c < 3; ++c) {
      g.color[c] = sigmoid(raw[k + 3 * i + c]);
      const double mod = std::clamp(raw[4 * k + 3 * i + c], -kScaleModulationClamp, kScaleModulationClamp);
      g.scale[c] = std::exp(anchor.raw_scales(i, c) + mod);
    }
    const Vec4 q = Vec4(1.0, 0.0, 0.0, 0.0) + raw.segment<4>(7 * k + 4 * i);
    g.rot = Quat::from_vec(q).normalized();
    if (!g.mu.allFinite() || !g.scale.allFinite() || !(g.scale.array() > 0.0).all())
      throw DecoderDivergence();
    tape.scales.row(i) = g.scale.transpose();
  }
  return out;
}

AnchorGrad AnchorGrad::zeros(int k) {
  AnchorGrad g;
  g.offsets = RowMatX3::Zero(k, 3);
  g.raw_scales = RowMatX3::Zero(k, 3);
  return g;
}

void AnchorGrad::add(const AnchorGrad& o) {
  feature += o.feature;
  offsets += o.offsets;
  raw_scales += o.raw_scales;
  center += o.center;
}

AnchorGrad decode_backward(const DecodeTape& tape, std::span<const GaussianGrad> upstream,
                           const GaussianDecoder& decoder, std::vector<MlpNet>* mlp_grad) {
  const int k = decoder.k();
  if (tape.decoder_version != decoder.version() || static_cast<int>(upstream.size()) != k ||
      tape.raw.size() != decoder.output_dim() || tape.scales.rows() != k)
    throw StaleTape();

  const Eigen::VectorXd& raw = tape.raw;
  Eigen::VectorXd d_raw(raw.size());
  AnchorGrad out = AnchorGrad::zeros(k);
  for (int i = 0; i < k; ++i) {
    const GaussianGrad& g = upstream[i];
    const double op = sigmoid(raw[i]);
    d_raw[i] = g.opacity * op * (1.0 - op);
    for (int c = 0; c < 3; ++c) {
      const double col = sigmoid(raw[k + 3 * i + c]);
      d_raw[k + 3 * i + c] = g.color[c] * col * (1.0 - col);
      // scale = exp(raw_scale + clamp(mod)).
      const double d_log = g.scale[c] * tape.scales(i, c);
      out.raw_scales(i, c) = d_log;
      d_raw[4 * k + 3 * i + c] = std::abs(raw[4 * k + 3 * i + c]) < kScaleModulationClamp ? d_log : 0.0;
    }
    const Vec4 q = Vec4(1.0, 0.0, 0.0, 0.0) + raw.segment<4>(7 * k + 4 * i);
    const double n = q.norm();
    const Vec4 u = q / n;
    d_raw.segment<4>(7 * k + 4 * i) = (g.rot - u * u.dot(g.rot)) / n;
    out.offsets.row(i) = g.mu.transpose() * tape.voxel;
    out.center += g.mu;
  }

  const Eigen::VectorXd d_in = decoder.backward(tape.input, tape.hidden, d_raw, mlp_grad);
  out.feature = d_in.head(kFeatureDim);
  // Distance and direction inputs both depend on the anchor center.
  const double dist = tape.view.norm();
  const Vec3 dir = tape.view / dist;
  const Vec3 d_dir = d_in.segment<3>(kFeatureDim + 1);
  out.center += dir * (d_in[kFeatureDim] / tape.d_max);
  out.center += (d_dir - dir * dir.dot(d_dir)) / dist;
  return out;
}

DecodedView decode_view(const LoDHierarchy& h, const GaussianDecoder& decoder, const Camera& cam,
                        std::span<const AnchorId> ids) {
  DecodedView v;
  v.anchor_ids.assign(ids.begin(), ids.end());
  v.gaussians.reserve(ids.size() * decoder.k());
  v.tapes.reserve(ids.size());
  for (AnchorId id : ids) {
    const Anchor* a = h.find(id);
    if (!a) throw std::invalid_argument("unknown anchor id");
    DecodedAnchor d = decode(*a, cam, decoder, h.config());
    for (auto& g : d.gaussians) {
      v.levels.push_back(g.level);
      v.gaussians.push_back(g);
    }
    v.tapes.push_back(std::move(d.tape));
  }
  return v;
}

double DropoutSchedule::rate(int level, std::int64_t step) const {
  if (total_steps <= 0) throw std::invalid_argument("dropout schedule needs total_steps > 0");
  if (step < 0 || step > total_steps) throw std::invalid_argument("dropout step out of range");
  return gamma(level) * static_cast<double>(step) / static_cast<double>(total_steps);
}

std::size_t DropoutMask::dropped() const {
  return static_cast<std::size_t>(std::count(factor.begin(), factor.end(), 0.0));
}

DropoutMask dropout_mask(std::span<const int> levels, std::int64_t step, const DropoutSchedule& sched,
                         std::uint64_t seed, bool training) {
  DropoutMask mask;
  mask.factor.assign(levels.size(), 1.0);
  if (!training) return mask;
  SplitMix64 rng(mix_seed(seed, static_cast<std::uint64_t>(step)));
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double r = sched.rate(levels[i], step);
    if (!(r < 1.0)) throw std::logic_error("dropout rate must stay below 1");
    if (r <= 0.0) continue;
    mask.factor[i] = rng.uniform() < r ? 0.0 : 1.0 / (1.0 - r);
  }
  return mask;
}

}  // namespace streamlod
