#include "streamlod/model.hpp"

#include "streamlod/byte_io.hpp"

namespace streamlod {

namespace {

template <typename Derived>
void round_f32(Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<float>(m(r, c));
}

template <typename Derived>
void put_matrix(ByteWriter& w, const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(static_cast<float>(m(r, c)));
}

template <typename Derived>
void get_matrix(ByteReader& r, Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f32();
}

constexpr std::uint8_t kStateDynamic = 1;
constexpr std::uint8_t kStatePromoted = 2;

}  // namespace

void Model::round_to_f32() {
  for (auto& a : hierarchy.anchors()) {
    round_f32(a.center);
    round_f32(a.feature);
    round_f32(a.offsets);
    round_f32(a.raw_scales);
  }
  for (auto& n : decoder.mutable_nets()) {
    round_f32(n.w1);
    round_f32(n.b1);
    round_f32(n.w2);
    round_f32(n.b2);
  }
  if (latents) latents->round_to_f32();
}

RenderOutput render_model(const Model& m, const Camera& cam, const RenderSettings& settings) {
  const auto ids = select_anchors(m.hierarchy, cam);
  const DecodedView dv = decode_view(m.hierarchy, m.decoder, cam, ids);
  return render(dv.gaussians, cam, settings);
}

std::vector<std::uint8_t> encode_checkpoint(const Model& m) {
  const LoDConfig& cfg = m.hierarchy.config();
  const int k = m.decoder.k();
  ByteWriter w;
  w.bytes("SLOD");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(cfg.levels));
  w.u64(m.hierarchy.size());
  w.u32(static_cast<std::uint32_t>(k));
  w.u32(kFeatureDim);
  for (const auto& a : m.hierarchy.anchors()) {
    if (a.k() != k) throw CheckpointError("anchor K does not match decoder");
    w.u64(a.id);
    w.u32(static_cast<std::uint32_t>(a.level));
    put_matrix(w, a.center.transpose());
    put_matrix(w, a.feature.transpose());
    put_matrix(w, a.offsets);
    put_matrix(w, a.raw_scales);
    std::uint8_t state = a.state == AnchorState::Dynamic ? kStateDynamic : 0;
    if (a.promoted) state |= kStatePromoted;
    w.u8(state);
  }

  w.bytes("LODC");
  w.f64(cfg.delta);
  w.f64(cfg.d_max);
  w.f64(cfg.d_min);
  w.f64(cfg.beta);
  w.f64(cfg.d0);
  w.u32(static_cast<std::uint32_t>(cfg.l_max));
  w.u32(static_cast<std::uint32_t>(cfg.delta_l));
  w.f64(cfg.grad_threshold);
  w.f64(cfg.opacity_prune);

  w.bytes("MLP0");
  w.u32(m.decoder.layout() == DecoderLayout::Separate ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(m.decoder.nets().size()));
  for (const auto& n : m.decoder.nets()) {
    w.u32(static_cast<std::uint32_t>(n.w1.cols()));
    w.u32(static_cast<std::uint32_t>(n.w1.rows()));
    w.u32(static_cast<std::uint32_t>(n.w2.rows()));
    put_matrix(w, n.w1);
    put_matrix(w, n.b1.transpose());
    put_matrix(w, n.w2);
    put_matrix(w, n.b2.transpose());
  }

  if (m.latents) {
    w.bytes("LATD");
    w.u32(static_cast<std::uint32_t>(m.latents->feature.rows()));
    w.u32(static_cast<std::uint32_t>(m.latents->offset.rows()));
    w.u32(static_cast<std::uint32_t>(m.latents->feature.cols()));
    put_matrix(w, m.latents->feature);
    put_matrix(w, m.latents->offset);
  }
  return w.take();
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  try {
    ByteReader r(bytes);
    if (r.bytes(4) != "SLOD") throw CheckpointError("bad checkpoint magic");
    if (r.u32() != kCheckpointVersion) throw CheckpointError("unknown checkpoint version");
    const int levels = static_cast<int>(r.u32());
    const std::uint64_t count = r.u64();
    const int k = static_cast<int>(r.u32());
    if (r.u32() != kFeatureDim) throw CheckpointError("unsupported feature width");
    if (k < 1) throw CheckpointError("invalid K");

    std::vector<Anchor> anchors;
    for (std::uint64_t i = 0; i < count; ++i) {
      Anchor a;
      a.id = r.u64();
      a.level = static_cast<int>(r.u32());
      a.offsets.resize(k, 3);
      a.raw_scales.resize(k, 3);
      Eigen::RowVector3d c;
      get_matrix(r, c);
      a.center = c.transpose();
      Eigen::RowVectorXd f(kFeatureDim);
      get_matrix(r, f);
      a.feature = f.transpose();
      get_matrix(r, a.offsets);
      get_matrix(r, a.raw_scales);
      const std::uint8_t state = r.u8();
      a.state = (state & kStateDynamic) ? AnchorState::Dynamic : AnchorState::Static;
      a.promoted = (state & kStatePromoted) != 0;
      anchors.push_back(std::move(a));
    }

    if (r.bytes(4) != "LODC") throw CheckpointError("missing LoD section");
    LoDConfig cfg;
    cfg.levels = levels;
    cfg.k = k;
    cfg.delta = r.f64();
    cfg.d_max = r.f64();
    cfg.d_min = r.f64();
    cfg.beta = r.f64();
    cfg.d0 = r.f64();
    cfg.l_max = static_cast<int>(r.u32());
    cfg.delta_l = static_cast<int>(r.u32());
    cfg.grad_threshold = r.f64();
    cfg.opacity_prune = r.f64();
    cfg.validate();

    if (r.bytes(4) != "MLP0") throw CheckpointError("missing decoder section");
    const std::uint32_t layout = r.u32();
    if (layout > 1) throw CheckpointError("unknown decoder layout");
    const std::uint32_t nets = r.u32();
    std::vector<MlpNet> mlps;
    for (std::uint32_t i = 0; i < nets; ++i) {
      const int in = static_cast<int>(r.u32());
      const int hidden = static_cast<int>(r.u32());
      const int out = static_cast<int>(r.u32());
      if (in < 1 || hidden < 1 || out < 1 || in > 4096 || hidden > 4096 || out > 4096)
        throw CheckpointError("invalid decoder dims");
      MlpNet n = MlpNet::zeros(in, hidden, out);
      get_matrix(r, n.w1);
      Eigen::RowVectorXd b1(hidden), b2(out);
      get_matrix(r, b1);
      get_matrix(r, n.w2);
      get_matrix(r, b2);
      n.b1 = b1.transpose();
      n.b2 = b2.transpose();
      mlps.push_back(std::move(n));
    }

    Model m;
    m.hierarchy = LoDHierarchy(cfg);
    for (auto& a : anchors) m.hierarchy.add(std::move(a));
    m.decoder = GaussianDecoder::from_nets(k, layout == 1 ? DecoderLayout::Separate : DecoderLayout::Shared,
                                           std::move(mlps));

    if (!r.at_end()) {
      if (r.bytes(4) != "LATD") throw CheckpointError("unknown checkpoint section");
      const int fr = static_cast<int>(r.u32());
      const int orows = static_cast<int>(r.u32());
      const int cols = static_cast<int>(r.u32());
      if (fr != kFeatureDim || orows != 3 * k || cols != kLatentDim)
        throw CheckpointError("latent decoder shape mismatch");
      LatentDecoders ld;
      ld.feature.resize(fr, cols);
      ld.offset.resize(orows, cols);
      get_matrix(r, ld.feature);
      get_matrix(r, ld.offset);
      ld.frozen = true;
      m.latents = std::move(ld);
    }
    if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint");
    return m;
  } catch (const TruncatedInput&) {
    throw CheckpointError("truncated checkpoint");
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  write_file_bytes(path, encode_checkpoint(m));
}

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace streamlod
