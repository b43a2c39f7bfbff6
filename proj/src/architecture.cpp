#include "danlab/architecture.hpp"

#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace danlab {

LayerSpec LayerSpec::conv(Index kernel, Index stride, Index padding, Index out_channels) {
  LayerSpec l;
  l.kind = LayerKind::kConv;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = padding;
  l.out_channels = out_channels;
  return l;
}

LayerSpec LayerSpec::batchnorm() {
  LayerSpec l;
  l.kind = LayerKind::kBatchNorm;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool(Index window, Index stride) {
  LayerSpec l;
  l.kind = LayerKind::kMaxPool;
  l.kernel = window;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::avgpool(Index window, Index stride) {
  LayerSpec l = maxpool(window, stride);
  l.kind = LayerKind::kAvgPool;
  return l;
}

LayerSpec LayerSpec::upsample(Index factor) {
  LayerSpec l;
  l.kind = LayerKind::kUpsample;
  l.factor = factor;
  return l;
}

LayerSpec LayerSpec::dense_block(Index units, Index growth) {
  LayerSpec l;
  l.kind = LayerKind::kDenseBlock;
  l.units = units;
  l.growth = growth;
  return l;
}

std::string_view to_string(AttentionFamily family) {
  switch (family) {
    case AttentionFamily::kChannel: return "CA";
    case AttentionFamily::kSpatial: return "SA";
    case AttentionFamily::kLoss: return "LA";
  }
  return "?";
}

namespace {

AttentionFamily parse_family(const std::string& s) {
  if (s == "CA") return AttentionFamily::kChannel;
  if (s == "SA") return AttentionFamily::kSpatial;
  if (s == "LA") return AttentionFamily::kLoss;
  throw ConfigError("unknown attention family '" + s + "' (expected CA, SA or LA)");
}

// key=value tokens of one layer line.
std::map<std::string, Index> parse_fields(std::istringstream& in, const std::string& line) {
  std::map<std::string, Index> fields;
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value in '" + line + "'");
    try {
      fields[token.substr(0, eq)] = std::stoll(token.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("non-integer value in '" + line + "'");
    }
  }
  return fields;
}

Index take(std::map<std::string, Index>& fields, const std::string& key, const std::string& line,
           std::optional<Index> fallback = std::nullopt) {
  auto it = fields.find(key);
  if (it == fields.end()) {
    if (fallback) return *fallback;
    throw ConfigError("missing '" + key + "' in '" + line + "'");
  }
  const Index v = it->second;
  fields.erase(it);
  return v;
}

}  // namespace

Index ArchitectureSpec::channels_at(Index position) const {
  if (position < 0 || position > static_cast<Index>(layers.size())) {
    throw std::out_of_range("position " + std::to_string(position) + " outside architecture");
  }
  Index channels = input_channels;
  for (Index i = 0; i < position; ++i) {
    const auto& l = layers[static_cast<std::size_t>(i)];
    if (l.kind == LayerKind::kConv) channels = l.out_channels;
    if (l.kind == LayerKind::kDenseBlock) channels += l.units * l.growth;
  }
  return channels;
}

const SiteSpec* ArchitectureSpec::site(int id) const {
  for (const auto& s : sites) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

void ArchitectureSpec::validate() const {
  if (spatial_rank < 1 || spatial_rank > 3) throw ConfigError("spatial_rank must be 1, 2 or 3");
  if (input_channels < 1) throw ConfigError("input_channels must be positive");
  if (classes < 2) throw ConfigError("classes must be >= 2");
  if (layers.empty()) throw ConfigError("architecture has no layers");
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::kConv:
        if (l.kernel < 1 || l.stride < 1 || l.padding < 0 || l.out_channels < 1) {
          throw ConfigError("invalid conv layer");
        }
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        if (l.kernel < 1 || l.stride < 1) throw ConfigError("invalid pooling layer");
        break;
      case LayerKind::kUpsample:
        if (l.factor < 1) throw ConfigError("upsample factor must be >= 1");
        break;
      case LayerKind::kDenseBlock:
        if (l.units < 1 || l.growth < 1) throw ConfigError("invalid dense block");
        break;
      default: break;
    }
  }
  const Index end = static_cast<Index>(layers.size());
  std::set<int> ids;
  std::set<Index> positions;
  for (const auto& s : sites) {
    if (!ids.insert(s.id).second) throw ConfigError("duplicate attention site id " + std::to_string(s.id));
    if (s.position < 0 || s.position > end) {
      throw ConfigError("attention site " + std::to_string(s.id) + " references a missing position");
    }
    if (!positions.insert(s.position).second) {
      throw ConfigError("two attention sites share position " + std::to_string(s.position));
    }
    if ((s.family == AttentionFamily::kLoss) != (s.position == end)) {
      throw ConfigError("loss attention must sit exactly at the loss layer");
    }
    if (s.family == AttentionFamily::kSpatial && channels_at(s.position) < 2) {
      throw ConfigError("spatial attention needs at least two channels");
    }
  }
  if (channels_at(end) != classes) {
    throw ConfigError("final layer produces " + std::to_string(channels_at(end)) +
                      " channels, expected " + std::to_string(classes));
  }
}

std::string ArchitectureSpec::to_text() const {
  std::ostringstream os;
  os << "spatial_rank " << spatial_rank << '\n';
  os << "input_channels " << input_channels << '\n';
  os << "classes " << classes << '\n';
  auto emit_sites = [&](Index position) {
    for (const auto& s : sites) {
      if (s.position == position) os << "site " << s.id << ' ' << to_string(s.family) << '\n';
    }
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    emit_sites(static_cast<Index>(i));
    const auto& l = layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        os << "conv kernel=" << l.kernel << " stride=" << l.stride << " pad=" << l.padding
           << " out=" << l.out_channels << '\n';
        break;
      case LayerKind::kBatchNorm: os << "bn\n"; break;
      case LayerKind::kRelu: os << "relu\n"; break;
      case LayerKind::kMaxPool: os << "maxpool window=" << l.kernel << " stride=" << l.stride << '\n'; break;
      case LayerKind::kAvgPool: os << "avgpool window=" << l.kernel << " stride=" << l.stride << '\n'; break;
      case LayerKind::kUpsample: os << "upsample factor=" << l.factor << '\n'; break;
      case LayerKind::kDenseBlock: os << "dense units=" << l.units << " growth=" << l.growth << '\n'; break;
    }
  }
  emit_sites(static_cast<Index>(layers.size()));
  return os.str();
}

ArchitectureSpec ArchitectureSpec::parse(std::string_view text) {
  ArchitectureSpec arch;
  arch.layers.clear();
  std::istringstream lines{std::string(text)};
  std::string line;
  while (std::getline(lines, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream in(line);
    std::string word;
    if (!(in >> word)) continue;
    if (word == "spatial_rank" || word == "input_channels" || word == "classes") {
      Index v = 0;
      if (!(in >> v)) throw ConfigError("expected integer after '" + word + "'");
      (word == "spatial_rank" ? arch.spatial_rank : word == "classes" ? arch.classes : arch.input_channels) = v;
      continue;
    }
    if (word == "site") {
      SiteSpec s;
      std::string family;
      if (!(in >> s.id >> family)) throw ConfigError("expected 'site <id> <CA|SA|LA>'");
      s.family = parse_family(family);
      s.position = static_cast<Index>(arch.layers.size());
      arch.sites.push_back(s);
      continue;
    }
    auto fields = parse_fields(in, line);
    LayerSpec l;
    if (word == "conv") {
      l = LayerSpec::conv(take(fields, "kernel", line), take(fields, "stride", line, 1),
                          take(fields, "pad", line, 0), take(fields, "out", line));
    } else if (word == "bn") {
      l = LayerSpec::batchnorm();
    } else if (word == "relu") {
      l = LayerSpec::relu();
    } else if (word == "maxpool" || word == "avgpool") {
      const Index window = take(fields, "window", line);
      const Index stride = take(fields, "stride", line, window);
      l = word == "maxpool" ? LayerSpec::maxpool(window, stride) : LayerSpec::avgpool(window, stride);
    } else if (word == "upsample") {
      l = LayerSpec::upsample(take(fields, "factor", line));
    } else if (word == "dense") {
      l = LayerSpec::dense_block(take(fields, "units", line), take(fields, "growth", line));
    } else {
      throw ConfigError("unknown layer '" + word + "'");
    }
    if (!fields.empty()) throw ConfigError("unknown field '" + fields.begin()->first + "' in '" + line + "'");
    arch.layers.push_back(l);
  }
  arch.validate();
  return arch;
}

ArchitectureSpec ArchitectureSpec::preset(std::string_view name) {
  ArchitectureSpec a;
  using L = LayerSpec;
  if (name == "desk2d" || name == "desk3d") {
    a.spatial_rank = name == "desk2d" ? 2 : 3;
    a.input_channels = 1;
    a.classes = 3;
    a.layers = {L::conv(3, 1, 1, 8), L::batchnorm(), L::relu(),
                // site 1
                L::dense_block(3, 4), L::batchnorm(), L::relu(), L::conv(1, 1, 0, 12),
                // site 2
                L::dense_block(3, 4), L::batchnorm(), L::relu(), L::conv(1, 1, 0, 8),
                // site 3
                L::batchnorm(), L::relu(), L::conv(3, 1, 1, 3)};
    a.sites = {{1, 3, AttentionFamily::kChannel},
               {2, 7, AttentionFamily::kChannel},
               {3, 11, AttentionFamily::kSpatial},
               {4, 14, AttentionFamily::kLoss}};
  } else if (name == "mini2d") {
    a.spatial_rank = 2;
    a.input_channels = 1;
    a.classes = 2;
    a.layers = {L::conv(3, 1, 1, 4), L::batchnorm(), L::relu(),
                // site 1
                L::maxpool(2, 2), L::dense_block(1, 2),
                // site 2
                L::upsample(2), L::conv(3, 1, 1, 4), L::relu(),
                // site 3
                L::conv(1, 1, 0, 2)};
    a.sites = {{1, 3, AttentionFamily::kChannel},
               {2, 5, AttentionFamily::kChannel},
               {3, 8, AttentionFamily::kSpatial},
               {4, 9, AttentionFamily::kLoss}};
  } else {
    throw ConfigError("unknown architecture preset '" + std::string(name) + "'");
  }
  a.validate();
  return a;
}

Index receptive_field(const ArchitectureSpec& arch, Index position) {
  const Index end = static_cast<Index>(arch.layers.size());
  if (position < 0 || position > end) throw std::out_of_range("receptive_field: position outside architecture");
  const auto floor_div = [](Index a, Index b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
  // The read window of a loss unit depends on its phase relative to the
  // strides and upsampling factors, so propagate the exact index interval
  // of every phase in one period and keep the widest.
  Index period = 1;
  for (Index i = position; i < end; ++i) {
    const auto& l = arch.layers[static_cast<std::size_t>(i)];
    if (l.kind == LayerKind::kUpsample) period *= l.factor;
    if (l.kind == LayerKind::kConv || l.kind == LayerKind::kMaxPool || l.kind == LayerKind::kAvgPool) period *= l.stride;
  }
  Index widest = 1;
  for (Index unit = 0; unit < period; ++unit) {
    Index lo = unit;
    Index hi = unit;
    for (Index i = end; i-- > position;) {
      const auto& l = arch.layers[static_cast<std::size_t>(i)];
      switch (l.kind) {
        case LayerKind::kConv:
        case LayerKind::kMaxPool:
        case LayerKind::kAvgPool:
          lo = lo * l.stride - l.padding;
          hi = hi * l.stride - l.padding + l.kernel - 1;
          break;
        case LayerKind::kDenseBlock:
          lo -= l.units;
          hi += l.units;
          break;
        case LayerKind::kUpsample:
          lo = floor_div(lo, l.factor);
          hi = floor_div(hi, l.factor);
          break;
        default: break;
      }
    }
    widest = std::max(widest, hi - lo + 1);
  }
  return widest;
}

}  // namespace danlab
