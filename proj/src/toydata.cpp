#include "ageflow/toydata.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <fstream>
#include <sstream>

namespace ageflow::toy {

namespace {

constexpr int kPixels = kSize * kSize;

void check_image(const Image& image) {
  if (image.size() != static_cast<std::size_t>(kPixels)) {
    throw Fault("toy image must have " + std::to_string(kPixels) + " pixels, got " + std::to_string(image.size()));
  }
}

bool foreground(std::uint8_t v) { return v >= kThreshold; }

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05d.pgm", index);
  return buf;
}

}  // namespace

ToySample synth_image(int g, int a, int dx, int dy, Rng& rng, const SynthOptions& options) {
  if (g < 0 || g >= kGroups) throw Fault("synth_image: group " + std::to_string(g) + " out of range");
  if (a < 0 || a >= kAttrs) throw Fault("synth_image: attribute " + std::to_string(a) + " out of range");
  if (std::abs(dx) > kMaxShift || std::abs(dy) > kMaxShift) {
    throw Fault("synth_image: shift (" + std::to_string(dx) + ", " + std::to_string(dy) + ") out of range");
  }
  if (!(options.noise_sigma >= 0)) throw Fault("synth_image: negative noise level");
  const double r = kRadii[g] + (options.jitter ? rng.uniform(-0.5, 0.5) : 0.0);
  const double inner = r - 2.0;
  const double cx = kSize / 2 + dx, cy = kSize / 2 + dy;

  ToySample s;
  s.g = g;
  s.a = a;
  s.dx = dx;
  s.dy = dy;
  s.image.resize(kPixels);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const bool on = d <= r && (a == 0 || d >= inner);
      double v = on ? 255.0 : 0.0;
      if (options.noise_sigma > 0) v += options.noise_sigma * rng.normal();
      s.image[y * kSize + x] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
  return s;
}

Centroid oracle_center(const Image& image) {
  check_image(image);
  double sx = 0, sy = 0;
  int n = 0;
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x)
      if (foreground(image[y * kSize + x])) {
        sx += x;
        sy += y;
        ++n;
      }
  if (n == 0) throw Fault("toy oracle: empty foreground");
  return {sx / n, sy / n};
}

int oracle_attr(const Image& image) {
  const Centroid c = oracle_center(image);
  const int cx = static_cast<int>(std::lround(c.x)), cy = static_cast<int>(std::lround(c.y));
  double sum = 0;
  int n = 0;
  for (int y = cy - 1; y <= cy + 1; ++y)
    for (int x = cx - 1; x <= cx + 1; ++x) {
      if (x < 0 || y < 0 || x >= kSize || y >= kSize) continue;
      sum += image[y * kSize + x];
      ++n;
    }
  return sum / n < kThreshold ? 1 : 0;
}

double oracle_radius(const Image& image) {
  const Centroid c = oracle_center(image);
  if (oracle_attr(image) == 0) {
    int area = 0;
    for (std::uint8_t v : image) area += foreground(v);
    return std::sqrt(area / std::numbers::pi);
  }
  // The outermost pixel centres sit about half a pixel inside the edge.
  double far = 0;
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x)
      if (foreground(image[y * kSize + x])) far = std::max(far, std::hypot(x - c.x, y - c.y));
  return far + 0.5;
}

int oracle_age(const Image& image) {
  const double r = oracle_radius(image);
  int best = 0;
  for (int g = 1; g < kGroups; ++g)
    if (std::abs(r - kRadii[g]) < std::abs(r - kRadii[best])) best = g;
  return best;
}

std::string split_for_index(int index) {
  return mix64(static_cast<std::uint64_t>(index)) % 5 == 0 ? "test" : "train";
}

Manifest dataset_generate(int count, std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (count < 1) throw Fault("dataset_generate: count must be positive");
  std::filesystem::create_directories(out_dir);
  Manifest manifest(count);
  std::vector<Image> images(count);
  const Rng root(seed);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < count; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    const int cell = i % (kGroups * kAttrs);
    const int g = cell / kAttrs, a = cell % kAttrs;
    const int dx = rng.uniform_int(-kMaxShift, kMaxShift);
    const int dy = rng.uniform_int(-kMaxShift, kMaxShift);
    images[i] = synth_image(g, a, dx, dy, rng).image;
    manifest[i] = {file_name(i), g, a, dx, dy, split_for_index(i)};
  }
  for (int i = 0; i < count; ++i) write_pgm(out_dir / manifest[i].file, images[i]);
  write_manifest(out_dir / "manifest.csv", manifest);
  return manifest;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw Fault("cannot write manifest " + path.string());
  out << "file,g,a,dx,dy,split\n";
  for (const auto& e : manifest) out << e.file << ',' << e.g << ',' << e.a << ',' << e.dx << ',' << e.dy << ',' << e.split << '\n';
  if (!out) throw Fault("write failed for manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Fault("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "file,g,a,dx,dy,split") {
    throw Fault("manifest " + path.string() + ": unexpected header");
  }
  Manifest manifest;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Fault("manifest " + path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      ManifestEntry e{f[0], std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]), std::stoi(f[4]), f[5]};
      if (e.g < 0 || e.g >= kGroups || e.a < 0 || e.a >= kAttrs || (e.split != "train" && e.split != "test")) {
        throw std::invalid_argument("label out of range");
      }
      manifest.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw Fault("manifest " + path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return manifest;
}

void write_pgm(const std::filesystem::path& path, const Image& image, int width, int height) {
  if (image.size() != static_cast<std::size_t>(width) * height) throw Fault("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Fault("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data()), static_cast<std::streamsize>(image.size()));
  if (!out) throw Fault("write failed for " + path.string());
}

Image read_pgm(const std::filesystem::path& path, int* width, int* height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Fault("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    while (in >> t) {
      if (t[0] != '#') return t;
      std::string rest;
      std::getline(in, rest);
    }
    throw Fault(path.string() + ": truncated PGM header");
  };
  if (token() != "P5") throw Fault(path.string() + ": not a binary PGM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::invalid_argument&) {
    throw Fault(path.string() + ": malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw Fault(path.string() + ": unsupported PGM dimensions or depth");
  in.get();
  Image image(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(image.data()), static_cast<std::streamsize>(image.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.size())) throw Fault(path.string() + ": truncated PGM data");
  if (width) *width = w;
  if (height) *height = h;
  return image;
}

std::vector<ToySample> load_split(const std::filesystem::path& manifest_path, const std::string& split) {
  const Manifest manifest = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<ToySample> out;
  for (const auto& e : manifest) {
    if (!split.empty() && e.split != split) continue;
    int w = 0, h = 0;
    Image img = read_pgm(dir / e.file, &w, &h);
    if (w != kSize || h != kSize) throw Fault(e.file + ": expected " + std::to_string(kSize) + "x" + std::to_string(kSize));
    out.push_back({std::move(img), e.g, e.a, e.dx, e.dy});
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("to_tensor: empty batch");
  Tensor<T> t({static_cast<int>(images.size()), 1, kSize, kSize});
  for (std::size_t n = 0; n < images.size(); ++n) {
    check_image(*images[n]);
    for (int i = 0; i < kPixels; ++i) t[n * kPixels + i] = static_cast<T>((*images[n])[i]);
  }
  return t;
}

template <typename T>
Image from_tensor(const Tensor<T>& pixels, std::size_t offset) {
  if (pixels.size() < offset + kPixels) throw ShapeError("from_tensor: tensor too small");
  Image img(kPixels);
  for (int i = 0; i < kPixels; ++i) {
    const double v = static_cast<double>(pixels[offset + i]);
    img[i] = static_cast<std::uint8_t>(std::clamp(std::round(std::isfinite(v) ? v : 0.0), 0.0, 255.0));
  }
  return img;
}

template Tensor<float> to_tensor<float>(const std::vector<const Image*>&);
template Tensor<double> to_tensor<double>(const std::vector<const Image*>&);
template Image from_tensor<float>(const Tensor<float>&, std::size_t);
template Image from_tensor<double>(const Tensor<double>&, std::size_t);

}  // namespace ageflow::toy
