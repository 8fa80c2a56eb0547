#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "polypseg/image.hpp"
#include "polypseg/random.hpp"

namespace polypseg::testing {

namespace fs = std::filesystem;

SamplePair synthetic_polyp(std::uint64_t seed, Index height, Index width, const std::string& id) {
  Rng rng(seed);
  const double cx = rng.uniform(0.3, 0.7) * width;
  const double cy = rng.uniform(0.3, 0.7) * height;
  const double radius = rng.uniform(0.12, 0.25) * std::min(height, width);
  const double aspect = rng.uniform(0.7, 1.3);
  const double tilt = rng.uniform(0.0, std::numbers::pi);
  const double lobe_amp = rng.uniform(0.05, 0.15);
  const double lobe_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double fold_freq = rng.uniform(0.05, 0.12);
  const double fold_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const std::array<double, 3> mucosa{rng.uniform(150, 190), rng.uniform(60, 90), rng.uniform(50, 80)};
  const std::array<double, 3> polyp{rng.uniform(200, 235), rng.uniform(120, 150), rng.uniform(100, 130)};

  SamplePair pair;
  pair.id = id;
  pair.mask = Mask::Zero(height, width);
  for (auto& p : pair.image.planes) p = Plane8::Zero(height, width);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * std::cos(tilt) + dy * std::sin(tilt);
      const double v = (-dx * std::sin(tilt) + dy * std::cos(tilt)) * aspect;
      const double r = std::hypot(u, v);
      const double boundary = radius * (1.0 + lobe_amp * std::sin(3.0 * std::atan2(v, u) + lobe_phase));
      const bool inside = r < boundary;
      pair.mask(y, x) = inside ? 1 : 0;

      const double ex = (x - 0.5 * width) / (0.5 * width), ey = (y - 0.5 * height) / (0.5 * height);
      const double vignette = std::clamp(1.0 - 0.45 * (ex * ex + ey * ey), 0.3, 1.0);
      const double fold = 0.85 + 0.15 * std::sin(fold_freq * (x + 0.6 * y) + fold_phase);
      const double shade = inside ? 0.8 + 0.2 * (1.0 - r / boundary) : fold;
      const bool specular = inside && std::hypot(u + 0.3 * radius, v + 0.3 * radius) < 0.12 * radius;
      for (int c = 0; c < 3; ++c) {
        double value = (inside ? polyp[c] : mucosa[c]) * shade * vignette + 8.0 * rng.normal();
        if (specular) value = 245.0 + 5.0 * rng.uniform();
        pair.image.planes[c](y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
      }
    }
  }
  return pair;
}

std::vector<SamplePair> synthetic_dataset(std::uint64_t seed, std::size_t count, Index height, Index width) {
  std::vector<SamplePair> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(synthetic_polyp(Rng::derive(seed, i).next(), height, width, "sample" + std::to_string(i)));
  }
  return out;
}

void write_dataset(const fs::path& root, const std::vector<SamplePair>& pairs) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& p : pairs) {
    write_rgb(root / "images" / (p.id + ".png"), p.image);
    write_mask(root / "masks" / (p.id + ".png"), p.mask);
  }
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("polypseg-test-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace polypseg::testing
