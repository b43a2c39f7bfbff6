#include "danlab/dan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "danlab/metrics.hpp"

namespace danlab {

template <typename Scalar>
Stream<Scalar>::Stream(const ArchitectureSpec& arch, std::mt19937_64& rng) : specs_(arch.layers) {
  Index channels = arch.input_channels;
  for (const auto& l : arch.layers) {
    switch (l.kind) {
      case LayerKind::kConv:
        layers_.emplace_back(std::in_place_type<Conv<Scalar>>,
                             ConvSpec::isotropic(arch.spatial_rank, l.kernel, l.stride, l.padding, channels,
                                                 l.out_channels),
                             rng);
        channels = l.out_channels;
        break;
      case LayerKind::kBatchNorm: layers_.emplace_back(std::in_place_type<BatchNorm<Scalar>>, channels); break;
      case LayerKind::kDenseBlock:
        layers_.emplace_back(std::in_place_type<DenseBlock<Scalar>>, arch.spatial_rank, channels,
                             DenseBlockSpec{l.units, l.growth}, rng);
        channels += l.units * l.growth;
        break;
      default: layers_.emplace_back(l); break;
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Stream<Scalar>::forward(const Tensor<Scalar>& x, Index from, Index to, BatchNormMode mode) {
  Tensor<Scalar> h = x;
  for (Index i = from; i < to; ++i) {
    auto& layer = layers_[static_cast<std::size_t>(i)];
    if (auto* conv = std::get_if<Conv<Scalar>>(&layer)) {
      h = conv->forward(h);
    } else if (auto* bn = std::get_if<BatchNorm<Scalar>>(&layer)) {
      h = bn->forward(h, mode);
    } else if (auto* block = std::get_if<DenseBlock<Scalar>>(&layer)) {
      h = block->forward(h, mode);
    } else {
      const auto& l = std::get<LayerSpec>(layer);
      switch (l.kind) {
        case LayerKind::kRelu: h = relu(h); break;
        case LayerKind::kMaxPool: h = maxpool(h, l.kernel, l.stride); break;
        case LayerKind::kAvgPool: h = avgpool(h, l.kernel, l.stride); break;
        case LayerKind::kUpsample: h = upsample_nearest(h, l.factor); break;
        default: throw std::logic_error("parameterised layer stored without weights");
      }
    }
  }
  return h;
}

namespace {

template <typename Scalar>
void build_gates(const ArchitectureSpec& arch, const DanOptions& options, std::mt19937_64& rng,
                 std::map<int, std::variant<ChannelAttention<Scalar>, SpatialAttention<Scalar>>>& gates) {
  const auto bias = static_cast<Scalar>(options.gate_bias);
  for (const auto& site : arch.sites) {
    const Index channels = arch.channels_at(site.position);
    if (site.family == AttentionFamily::kChannel) {
      gates.emplace(site.id, ChannelAttention<Scalar>(channels, rng, 2, 4, bias));
    } else if (site.family == AttentionFamily::kSpatial) {
      gates.emplace(site.id, SpatialAttention<Scalar>(arch.spatial_rank, channels, rng, bias));
    }
  }
}

std::set<int> all_sites(const ArchitectureSpec& arch) {
  std::set<int> ids;
  for (const auto& s : arch.sites) ids.insert(s.id);
  return ids;
}

}  // namespace

template <typename Scalar>
TwoStreamDAN<Scalar>::TwoStreamDAN(ArchitectureSpec arch, std::uint64_t seed, DanOptions options)
    : arch_(std::move(arch)), options_(std::move(options)) {
  arch_.validate();
  std::mt19937_64 rng_a(seed);
  std::mt19937_64 rng_b(seed + 1);
  std::mt19937_64 rng_gates(seed + 2);
  streams_[0] = Stream<Scalar>(arch_, rng_a);
  streams_[1] = Stream<Scalar>(arch_, rng_b);
  build_gates(arch_, options_, rng_gates, gates_);
  enabled_ = all_sites(arch_);
}

template <typename Scalar>
TwoStreamDAN<Scalar> TwoStreamDAN<Scalar>::symmetric(ArchitectureSpec arch, std::uint64_t seed,
                                                     DanOptions options) {
  TwoStreamDAN dan(std::move(arch), seed, std::move(options));
  std::mt19937_64 rng_a(seed);
  std::mt19937_64 rng_b(seed);
  dan.streams_[0] = Stream<Scalar>(dan.arch_, rng_a);
  dan.streams_[1] = Stream<Scalar>(dan.arch_, rng_b);
  return dan;
}

template <typename Scalar>
void TwoStreamDAN<Scalar>::set_enabled_sites(std::set<int> sites) {
  const auto known = all_sites(arch_);
  for (int id : sites) {
    if (!known.contains(id)) throw ConfigError("no attention site with id " + std::to_string(id));
  }
  enabled_ = std::move(sites);
}

template <typename Scalar>
DanOutput<Scalar> TwoStreamDAN<Scalar>::forward(const Tensor<Scalar>& x, BatchNormMode mode) {
  if (x.rank() != arch_.spatial_rank + 2 || x.dim(1) != arch_.input_channels) {
    throw ShapeError("DAN input must be [B," + std::to_string(arch_.input_channels) + ",spatial x" +
                     std::to_string(arch_.spatial_rank) + "], got " + to_string(x.shape()));
  }
  DanOutput<Scalar> out;
  Tensor<Scalar> a = x;
  Tensor<Scalar> b = x;
  const Index end = static_cast<Index>(arch_.layers.size());
  for (Index pos = 0; pos <= end; ++pos) {
    for (const auto& site : arch_.sites) {
      if (site.position != pos || site.family == AttentionFamily::kLoss) continue;
      if (!site_active(site)) {
        out.mean_gate[site.id] = 1.0;
        continue;
      }
      const Tensor<Scalar> fused = add(a, b);
      const Tensor<Scalar> gate = std::visit([&](const auto& m) { return m.forward(fused); }, gates_.at(site.id));
      const std::string name = "site" + std::to_string(site.id);
      a = apply_gate(a, GateHandle<Scalar>{name, gate, options_.gate_mode});
      b = apply_gate(b, GateHandle<Scalar>{name, gate, options_.gate_mode});
      out.mean_gate[site.id] = static_cast<double>(gate.data().template cast<double>().mean());
    }
    if (pos < end) {
      a = streams_[0].forward(a, pos, pos + 1, mode);
      b = streams_[1].forward(b, pos, pos + 1, mode);
    }
  }
  out.p = a;
  out.q = b;
  {
    NoGradScope<Scalar> no_grad;
    out.fused = softmax(add(a.detach(), b.detach()), 1);
  }
  return out;
}

template <typename Scalar>
DanLoss<Scalar> TwoStreamDAN<Scalar>::compute_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& q,
                                                   std::span<const LabelVolume> labels) const {
  if (p.shape() != q.shape()) throw ShapeError("stream outputs differ in shape");
  Shape weight_shape = p.shape();
  weight_shape[1] = 1;
  DanLoss<Scalar> out;
  const SiteSpec* loss_site = nullptr;
  for (const auto& s : arch_.sites) {
    if (s.family == AttentionFamily::kLoss) loss_site = &s;
  }
  if (loss_site != nullptr && site_active(*loss_site)) {
    out.weights = loss_attention(p, q, options_.la_kernel);
  } else {
    out.weights = Tensor<Scalar>::full(weight_shape, Scalar(1));
  }
  out.loss = add(weighted_softmax_ce(p, labels, out.weights), weighted_softmax_ce(q, labels, out.weights));
  return out;
}

template <typename Scalar>
std::vector<LabelVolume> TwoStreamDAN<Scalar>::predict(const Tensor<Scalar>& x) {
  NoGradScope<Scalar> no_grad;
  auto labels = argmax_labels(forward(x, BatchNormMode::kEval).fused);
  for (auto& l : labels) l = LabelVolume(l.shape(), static_cast<int>(arch_.classes), std::move(l.data()));
  return labels;
}

template <typename Scalar>
TwoStreamDAN<Scalar> TwoStreamDAN<Scalar>::clone() const {
  TwoStreamDAN copy = *this;
  copy.for_each_tensor([](const std::string&, Tensor<Scalar>& t, bool) { t = t.clone(); });
  return copy;
}

template <typename Scalar>
TwoStreamDAN<Scalar> TwoStreamDAN<Scalar>::ablate(const std::set<int>& sites) const {
  TwoStreamDAN copy = clone();
  copy.set_enabled_sites(sites);
  return copy;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> TwoStreamDAN<Scalar>::parameters() {
  std::vector<Tensor<Scalar>> out;
  for_each_tensor([&](const std::string&, Tensor<Scalar>& t, bool trainable) {
    if (trainable) out.push_back(t);
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> make_batch(std::span<const Sample> samples, std::span<const Index> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const Shape& first = samples[static_cast<std::size_t>(indices.front())].image.shape();
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), first.begin(), first.end());
  Tensor<Scalar> out(shape);
  const Index n = numel(first);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& image = samples[static_cast<std::size_t>(indices[i])].image;
    if (image.shape() != first) throw ShapeError("batch images differ in shape");
    out.data().segment(static_cast<Index>(i) * n, n) = image.data().template cast<Scalar>();
  }
  return out;
}

double learning_rate_at(const TrainConfig& config, Index iteration) {
  const Index step = std::max<Index>(
      1, static_cast<Index>(std::llround(static_cast<double>(config.iterations) * config.decay_fraction)));
  return config.learning_rate * std::pow(config.decay, static_cast<double>(iteration / step));
}

double mean_validation_dice(TwoStreamDAN<float>& dan, std::span<const Sample> samples) {
  if (samples.empty()) return 0;
  constexpr Index kChunk = 8;
  double total = 0;
  for (Index start = 0; start < static_cast<Index>(samples.size()); start += kChunk) {
    const Index stop = std::min<Index>(start + kChunk, static_cast<Index>(samples.size()));
    std::vector<Index> idx(static_cast<std::size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = dan.predict(make_batch<float>(samples, idx));
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto& truth = samples[static_cast<std::size_t>(idx[i])].labels;
      double sum = 0;
      for (int c = 1; c < truth.classes(); ++c) sum += dice(pred[i], truth, c);
      total += sum / (truth.classes() - 1);
    }
  }
  return total / static_cast<double>(samples.size());
}

std::vector<TrainLogRow> train(TwoStreamDAN<float>& dan, std::span<const Sample> training,
                               std::span<const Sample> validation, const TrainConfig& config) {
  if (training.empty()) throw std::invalid_argument("training set is empty");
  if (config.iterations < 0 || config.batch < 1) throw ConfigError("invalid iteration count or batch size");
  auto params = dan.parameters();
  std::vector<Buffer<float>> velocity;
  for (const auto& p : params) velocity.push_back(Buffer<float>::Zero(p.size()));

  const Index n = static_cast<Index>(training.size());
  const Index batch = std::min(config.batch, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  std::shuffle(order.begin(), order.end(), rng);
  Index cursor = 0;

  const SiteSpec* loss_site = nullptr;
  for (const auto& s : dan.arch().sites) {
    if (s.family == AttentionFamily::kLoss) loss_site = &s;
  }

  std::vector<TrainLogRow> log;
  log.reserve(static_cast<std::size_t>(config.iterations));
  for (Index it = 0; it < config.iterations; ++it) {
    std::vector<Index> idx;
    std::vector<LabelVolume> labels;
    bool epoch_end = false;
    while (static_cast<Index>(idx.size()) < batch) {
      idx.push_back(order[static_cast<std::size_t>(cursor)]);
      labels.push_back(training[static_cast<std::size_t>(idx.back())].labels);
      if (++cursor == n) {
        cursor = 0;
        epoch_end = true;
        std::shuffle(order.begin(), order.end(), rng);
      }
    }
    const Tensor<float> x = make_batch<float>(training, idx);

    Tape<float> tape;
    DanOutput<float> out;
    DanLoss<float> loss;
    {
      TapeScope<float> scope(tape);
      out = dan.forward(x, BatchNormMode::kTrain);
      loss = dan.compute_loss(out.p, out.q, labels);
    }
    const double value = loss.loss.item();
    if (!std::isfinite(value)) {
      throw TrainingError("non-finite loss " + std::to_string(value) + " at iteration " + std::to_string(it));
    }
    for (auto& p : params) p.zero_grad();
    if (!tape.empty()) tape.backward(loss.loss);

    const auto lr = static_cast<float>(learning_rate_at(config, it));
    const auto momentum = static_cast<float>(config.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].has_grad()) {
        velocity[i] = momentum * velocity[i] + params[i].grad();
      } else {
        velocity[i] *= momentum;
      }
      params[i].data() -= lr * velocity[i];
    }

    TrainLogRow row;
    row.iter = it;
    row.loss = value;
    row.mean_gate = out.mean_gate;
    if (loss_site != nullptr) row.mean_gate[loss_site->id] = loss.weights.data().cast<double>().mean();
    if (!validation.empty() && (epoch_end || it + 1 == config.iterations)) {
      row.val_dice = mean_validation_dice(dan, validation);
    }
    log.push_back(std::move(row));
  }
  return log;
}

std::string format_train_log(const std::vector<TrainLogRow>& rows) {
  std::ostringstream os;
  os << "iter,loss,mean_gate_site1,mean_gate_site2,mean_gate_site3,mean_gate_site4,val_dice\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.iter << ',' << r.loss;
    for (int site = 1; site <= 4; ++site) {
      const auto it = r.mean_gate.find(site);
      os << ',' << (it == r.mean_gate.end() ? 1.0 : it->second);
    }
    os << ',';
    if (r.val_dice) os << *r.val_dice;
    os << '\n';
  }
  return os.str();
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t& offset) {
  if (offset + 4 > in.size()) throw FormatError("truncated checkpoint", in.size());
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + static_cast<std::size_t>(i)])) << (8 * i);
  }
  offset += 4;
  return v;
}

}  // namespace

std::string encode_checkpoint(TwoStreamDAN<float>& dan) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  dan.for_each_tensor([&](const std::string& name, Tensor<float>& t, bool) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t.data()[i]));
  });
  return out;
}

void decode_checkpoint(const std::string& bytes, TwoStreamDAN<float>& dan) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("bad magic: not a DANCKPT1 file", 0);
  }
  std::map<std::string, Tensor<float>*> targets;
  dan.for_each_tensor([&](const std::string& name, Tensor<float>& t, bool) { targets[name] = &t; });
  std::set<std::string> seen;
  std::vector<std::pair<Tensor<float>*, Buffer<float>>> pending;
  std::size_t offset = sizeof(kCheckpointMagic);
  while (offset < bytes.size()) {
    const std::size_t record = offset;
    const std::uint32_t length = get_u32(bytes, offset);
    if (offset + length > bytes.size()) throw FormatError("truncated tensor name", bytes.size());
    const std::string name = bytes.substr(offset, length);
    offset += length;
    const auto it = targets.find(name);
    if (it == targets.end()) throw FormatError("unknown tensor '" + name + "'", record);
    if (!seen.insert(name).second) throw FormatError("duplicate tensor '" + name + "'", record);
    const std::uint32_t rank = get_u32(bytes, offset);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get_u32(bytes, offset));
    Tensor<float>& target = *it->second;
    if (shape != target.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + to_string(shape) + ", expected " +
                            to_string(target.shape()),
                        record);
    }
    Buffer<float> values(target.size());
    for (Index i = 0; i < target.size(); ++i) values[i] = std::bit_cast<float>(get_u32(bytes, offset));
    pending.emplace_back(&target, std::move(values));
  }
  for (const auto& [name, t] : targets) {
    if (!seen.contains(name)) throw FormatError("checkpoint lacks tensor '" + name + "'", bytes.size());
  }
  for (auto& [target, values] : pending) target->data() = std::move(values);
}

void save_checkpoint(const std::filesystem::path& path, TwoStreamDAN<float>& dan) {
  write_file(path, encode_checkpoint(dan));
}

void load_checkpoint(const std::filesystem::path& path, TwoStreamDAN<float>& dan) {
  decode_checkpoint(read_file(path), dan);
}

template class Stream<float>;
template class Stream<double>;
template class TwoStreamDAN<float>;
template class TwoStreamDAN<double>;
template Tensor<float> make_batch(std::span<const Sample>, std::span<const Index>);
template Tensor<double> make_batch(std::span<const Sample>, std::span<const Index>);

}  // namespace danlab
