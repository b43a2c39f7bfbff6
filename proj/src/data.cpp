#include "danlab/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace danlab {

namespace {

constexpr int kWalkBins = 32;

// Closed random walk over kWalkBins bins, smoothed and scaled to max |w| = amplitude.
std::vector<double> boundary_walk(std::mt19937_64& rng, double amplitude) {
  std::vector<double> w(kWalkBins, 0.0);
  if (amplitude == 0) return {};
  std::normal_distribution<double> step(0.0, 1.0);
  for (int i = 1; i < kWalkBins; ++i) w[i] = w[i - 1] + step(rng);
  const double closing = w[kWalkBins - 1] + step(rng);
  for (int i = 0; i < kWalkBins; ++i) w[i] -= closing * i / kWalkBins;
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<double> s(kWalkBins);
    for (int i = 0; i < kWalkBins; ++i) {
      s[i] = (w[(i + kWalkBins - 1) % kWalkBins] + 2 * w[i] + w[(i + 1) % kWalkBins]) / 4;
    }
    w = std::move(s);
  }
  double mean = 0;
  for (double v : w) mean += v;
  mean /= kWalkBins;
  double peak = 0;
  for (double& v : w) {
    v -= mean;
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 0) {
    for (double& v : w) v *= amplitude / peak;
  }
  return w;
}

// Periodic linear interpolation of a walk at a fraction t in [0,1).
double walk_at(const std::vector<double>& w, double t) {
  if (w.empty()) return 0;
  const double x = t * kWalkBins;
  const int i0 = static_cast<int>(std::floor(x)) % kWalkBins;
  const int i1 = (i0 + 1) % kWalkBins;
  const double f = x - std::floor(x);
  return (1 - f) * w[static_cast<std::size_t>(i0)] + f * w[static_cast<std::size_t>(i1)];
}

struct Perturbation {
  std::vector<double> azimuth;
  std::vector<double> elevation;
};

int classify(const PhantomGeometry& g, const Perturbation& p, const std::vector<double>& point,
             int classes) {
  const std::size_t rank = point.size();
  std::vector<double> rel(rank);
  for (std::size_t i = 0; i < rank; ++i) rel[i] = point[i] - g.center[i];
  if (rank >= 2) {
    const double c = std::cos(g.angle);
    const double s = std::sin(g.angle);
    const double y = rel[rank - 2];
    const double x = rel[rank - 1];
    rel[rank - 2] = c * y + s * x;
    rel[rank - 1] = -s * y + c * x;
  }
  double r2 = 0;
  for (std::size_t i = 0; i < rank; ++i) {
    rel[i] /= g.axes[i];
    r2 += rel[i] * rel[i];
  }
  const double r = std::sqrt(r2);
  double delta = 0;
  if (rank >= 2 && r > 0) {
    const double phi = std::atan2(rel[rank - 1], rel[rank - 2]);
    delta = walk_at(p.azimuth, (phi + std::numbers::pi) / (2 * std::numbers::pi));
    if (rank == 3) {
      const double theta = std::acos(std::clamp(rel[0] / r, -1.0, 1.0));
      delta = 0.5 * (delta + walk_at(p.elevation, theta / (2 * std::numbers::pi)));
    }
  }
  const double min_axis = *std::min_element(g.axes.begin(), g.axes.end());
  const double core = 1.0 + delta;
  const double shell = core + static_cast<double>(g.thickness) / min_axis;
  if (r <= core) return classes == 3 ? 2 : 1;
  if (r <= shell) return 1;
  return 0;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
  if (offset + 4 > in.size()) throw FormatError("truncated volume header", in.size());
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

std::string header(std::uint32_t kind, const Shape& shape) {
  std::string out(kVolumeMagic, sizeof(kVolumeMagic));
  put_u32(out, kind);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (count < 1) throw ConfigError("synthetic count must be positive");
  if (shape.size() < 2 || shape.size() > 3) throw ConfigError("synthetic shape must be 2-D or 3-D");
  for (Index d : shape) {
    if (d < 16) throw ConfigError("synthetic shape must be >= 16 per axis, got " + to_string(shape));
  }
  if (classes != 2 && classes != 3) throw ConfigError("synthetic data supports 2 or 3 classes");
  if (shell_min < 2 || shell_max < shell_min) throw ConfigError("shell thickness must be >= 2 voxels");
  if (!(core_min > 0) || core_max < core_min) throw ConfigError("invalid core size range");
  if (deformation < 0 || deformation > 0.5) throw ConfigError("deformation must lie in [0, 0.5]");
  if (noise_sigma < 0 || bias_amplitude < 0) throw ConfigError("noise levels must be non-negative");
  if (fitted_core_max() < core_min) throw ConfigError("phantom does not fit inside the volume");
}

double SyntheticSpec::fitted_core_max() const {
  // Outer radius is a * extent * (1 + deformation) + shell_max * a / core_min for core fraction a.
  const double extent = static_cast<double>(*std::min_element(shape.begin(), shape.end()));
  const double limit = (extent / 2 - 1) / (extent * (1 + deformation) + static_cast<double>(shell_max) / core_min);
  return std::min(core_max, limit);
}

int phantom_class(const PhantomGeometry& g, const std::vector<double>& point, int classes) {
  return classify(g, Perturbation{}, point, classes);
}

std::vector<Sample> generate(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t rank = spec.shape.size();
  const Index voxels = numel(spec.shape);
  const double extent = static_cast<double>(*std::min_element(spec.shape.begin(), spec.shape.end()));
  const double core_max = spec.fitted_core_max();
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(spec.count));
  for (Index n = 0; n < spec.count; ++n) {
    std::seed_seq seq{static_cast<std::uint64_t>(spec.seed), static_cast<std::uint64_t>(n)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    PhantomGeometry g;
    g.thickness = spec.shell_min + static_cast<Index>(unit(rng) * static_cast<double>(spec.shell_max - spec.shell_min + 1));
    g.thickness = std::min(g.thickness, spec.shell_max);
    for (std::size_t i = 0; i < rank; ++i) {
      g.axes.push_back((spec.core_min + (core_max - spec.core_min) * unit(rng)) * extent);
    }
    g.angle = unit(rng) * std::numbers::pi;
    const double min_axis = *std::min_element(g.axes.begin(), g.axes.end());
    const double max_axis = *std::max_element(g.axes.begin(), g.axes.end());
    // The rotated ellipse fits in a ball of the largest outer semi-axis.
    const double outer = max_axis * (1 + spec.deformation + static_cast<double>(g.thickness) / min_axis);
    for (std::size_t i = 0; i < rank; ++i) {
      const double half = static_cast<double>(spec.shape[i] - 1) / 2;
      const double slack = std::max(0.0, half - outer - 1);
      g.center.push_back(half + (2 * unit(rng) - 1) * std::min(slack, 0.1 * static_cast<double>(spec.shape[i])));
    }
    Perturbation p;
    p.azimuth = boundary_walk(rng, spec.deformation);
    if (rank == 3) p.elevation = boundary_walk(rng, spec.deformation);

    std::vector<double> bias_dir(rank);
    for (auto& d : bias_dir) d = normal(rng);
    double norm = 0;
    for (double d : bias_dir) norm += d * d;
    norm = std::sqrt(norm);

    LabelVolume labels(spec.shape, spec.classes);
    Buffer<float> image(voxels);
    std::vector<double> point(rank);
    for (Index v = 0; v < voxels; ++v) {
      Index rest = v;
      for (std::size_t i = rank; i-- > 0;) {
        point[i] = static_cast<double>(rest % spec.shape[i]);
        rest /= spec.shape[i];
      }
      const int cls = classify(g, p, point, spec.classes);
      labels[v] = static_cast<std::uint8_t>(cls);
      const int intensity_class = spec.classes == 2 && cls == 1 ? 1 : cls;
      double bias = 0;
      for (std::size_t i = 0; i < rank; ++i) {
        bias += bias_dir[i] / norm * (point[i] / static_cast<double>(spec.shape[i]) - 0.5);
      }
      const double value = kClassIntensity[intensity_class] + spec.bias_amplitude * bias +
                           spec.noise_sigma * normal(rng);
      image[v] = static_cast<float>(value);
    }
    Shape image_shape{1};
    image_shape.insert(image_shape.end(), spec.shape.begin(), spec.shape.end());
    samples.push_back(Sample{Tensor<float>(image_shape, std::move(image)), std::move(labels), std::move(g)});
  }
  return samples;
}

Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw std::invalid_argument("stack of zero images");
  const Shape& first = images.front()->shape();
  Shape shape{static_cast<Index>(images.size())};
  shape.insert(shape.end(), first.begin(), first.end());
  Tensor<float> out(shape);
  const Index n = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != first) throw ShapeError("cannot stack images of different shapes");
    out.data().segment(static_cast<Index>(i) * n, n) = images[i]->data();
  }
  return out;
}

std::string encode_volume(const Tensor<float>& volume) {
  std::string out = header(0, volume.shape());
  for (Index i = 0; i < volume.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(volume.data()[i]));
  return out;
}

std::string encode_volume(const LabelVolume& labels) {
  std::string out = header(1, labels.shape());
  out.append(reinterpret_cast<const char*>(labels.data().data()), labels.data().size());
  return out;
}

std::variant<Tensor<float>, LabelVolume> decode_volume(const std::string& bytes, int classes) {
  if (bytes.size() < sizeof(kVolumeMagic) ||
      std::memcmp(bytes.data(), kVolumeMagic, sizeof(kVolumeMagic)) != 0) {
    throw FormatError("bad magic: not a DANVOL1 file", 0);
  }
  std::size_t offset = sizeof(kVolumeMagic);
  const std::uint32_t kind = get_u32(bytes, offset);
  if (kind > 1) throw FormatError("unknown volume kind " + std::to_string(kind), offset);
  offset += 4;
  const std::uint32_t rank = get_u32(bytes, offset);
  offset += 4;
  if (rank == 0 || rank > 8) throw FormatError("unsupported rank " + std::to_string(rank), offset - 4);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i, offset += 4) {
    const std::uint32_t d = get_u32(bytes, offset);
    if (d == 0) throw FormatError("zero dimension", offset);
    shape.push_back(static_cast<Index>(d));
  }
  const std::size_t count = static_cast<std::size_t>(numel(shape));
  const std::size_t payload = kind == 0 ? 4 * count : count;
  if (bytes.size() < offset + payload) throw FormatError("truncated volume payload", bytes.size());
  if (bytes.size() > offset + payload) throw FormatError("trailing bytes after payload", offset + payload);
  if (kind == 0) {
    Buffer<float> data(static_cast<Index>(count));
    for (std::size_t i = 0; i < count; ++i) data[static_cast<Index>(i)] = std::bit_cast<float>(get_u32(bytes, offset + 4 * i));
    return Tensor<float>(shape, std::move(data));
  }
  std::vector<std::uint8_t> data(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  if (classes == 0) {
    const std::uint8_t top = data.empty() ? 0 : *std::max_element(data.begin(), data.end());
    classes = std::max(2, top + 1);
  }
  return LabelVolume(shape, classes, std::move(data));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_volume(const std::filesystem::path& path, const Tensor<float>& volume) {
  write_file(path, encode_volume(volume));
}

void write_volume(const std::filesystem::path& path, const LabelVolume& labels) {
  write_file(path, encode_volume(labels));
}

std::variant<Tensor<float>, LabelVolume> read_volume(const std::filesystem::path& path, int classes) {
  return decode_volume(read_file(path), classes);
}

Tensor<float> read_intensity(const std::filesystem::path& path) {
  auto v = read_volume(path);
  if (!std::holds_alternative<Tensor<float>>(v)) throw FormatError(path.string() + " holds labels, not intensities", 8);
  return std::get<Tensor<float>>(std::move(v));
}

LabelVolume read_labels(const std::filesystem::path& path, int classes) {
  auto v = read_volume(path, classes);
  if (!std::holds_alternative<LabelVolume>(v)) throw FormatError(path.string() + " holds intensities, not labels", 8);
  return std::get<LabelVolume>(std::move(v));
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::filesystem::create_directories(dir);
  std::ostringstream index;
  index << "id,image,labels,classes\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream id;
    id << std::setw(4) << std::setfill('0') << i;
    const std::string img = id.str() + "_img.vol";
    const std::string lbl = id.str() + "_lbl.vol";
    const auto& s = samples[i];
    Shape spatial(s.image.shape().begin() + 1, s.image.shape().end());
    write_volume(dir / img, Tensor<float>(spatial, s.image.data()));
    write_volume(dir / lbl, s.labels);
    index << id.str() << ',' << img << ',' << lbl << ',' << s.labels.classes() << '\n';
  }
  write_file(dir / "index.csv", index.str());
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::istringstream index(read_file(dir / "index.csv"));
  std::string line;
  std::getline(index, line);
  if (line != "id,image,labels,classes") throw FormatError("unexpected index.csv header in " + dir.string(), 0);
  std::vector<Sample> samples;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 4) throw FormatError("malformed index.csv row '" + line + "'", 0);
    Tensor<float> image = read_intensity(dir / cells[1]);
    Shape shape{1};
    shape.insert(shape.end(), image.shape().begin(), image.shape().end());
    LabelVolume labels = read_labels(dir / cells[2], std::stoi(cells[3]));
    if (labels.shape() != image.shape()) throw ShapeError("image and label shapes differ for " + cells[0]);
    samples.push_back(Sample{Tensor<float>(shape, image.data()), std::move(labels), {}});
  }
  return samples;
}

}  // namespace danlab
