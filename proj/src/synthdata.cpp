#include "sgdc/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sgdc/errors.hpp"
#include "sgdc/json_util.hpp"
#include "sgdc/objective.hpp"
#include "sgdc/tnsr.hpp"

namespace sgdc {

void SynthConfig::validate() const {
  if (image_size < 16 || image_size % 16 != 0) throw ConfigError("data.image_size must be a positive multiple of 16");
  if (channels != 1 && channels != 3) throw ConfigError("data.channels must be 1 or 3");
  if (blobs_min < 1 || blobs_max < blobs_min) throw ConfigError("data: need 1 <= blobs_min <= blobs_max");
  if (strokes_min < 0 || strokes_max < strokes_min) throw ConfigError("data: need 0 <= strokes_min <= strokes_max");
  if (!(contrast_min > 0) || contrast_max < contrast_min || contrast_max > 1) {
    throw ConfigError("data: need 0 < contrast_min <= contrast_max <= 1");
  }
  if (!(noise_std >= 0)) throw ConfigError("data.noise_std must be >= 0");
  if (!(contrast_min > noise_std)) throw ConfigError("data: contrast_min must exceed noise_std");
  if (morph_iters < 1) throw ConfigError("data.morph_iters must be >= 1");
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"image_size", c.image_size},     {"channels", c.channels},         {"blobs_min", c.blobs_min},
          {"blobs_max", c.blobs_max},       {"contrast_min", c.contrast_min}, {"contrast_max", c.contrast_max},
          {"noise_std", c.noise_std},       {"strokes_min", c.strokes_min},   {"strokes_max", c.strokes_max},
          {"morph_iters", c.morph_iters},   {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  StrictObject o(j, "data");
  o.get("image_size", c.image_size);
  o.get("channels", c.channels);
  o.get("blobs_min", c.blobs_min);
  o.get("blobs_max", c.blobs_max);
  o.get("contrast_min", c.contrast_min);
  o.get("contrast_max", c.contrast_max);
  o.get("noise_std", c.noise_std);
  o.get("strokes_min", c.strokes_min);
  o.get("strokes_max", c.strokes_max);
  o.get("morph_iters", c.morph_iters);
  o.get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

namespace {

// Separable box blur with clamped borders.
void box_blur(std::vector<double>& img, int n, int r) {
  std::vector<double> tmp(img.size());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (int d = -r; d <= r; ++d) s += img[y * n + std::clamp(x + d, 0, n - 1)];
      tmp[y * n + x] = s / (2 * r + 1);
    }
  }
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (int d = -r; d <= r; ++d) s += tmp[std::clamp(y + d, 0, n - 1) * n + x];
      img[y * n + x] = s / (2 * r + 1);
    }
  }
}

std::vector<std::uint8_t> draw_mask(Rng& rng, const SynthConfig& cfg) {
  const int n = cfg.image_size;
  const double sz = n;
  std::vector<double> ind(static_cast<std::size_t>(n) * n, 0.0);
  const int blobs = rng.range(cfg.blobs_min, cfg.blobs_max);
  for (int b = 0; b < blobs; ++b) {
    const double cy = rng.uniform(0.2, 0.8) * sz;
    const double cx = rng.uniform(0.2, 0.8) * sz;
    const double ra = rng.uniform(0.08, 0.24) * sz;
    const double rb = rng.uniform(0.08, 0.24) * sz;
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const int harmonic = rng.range(2, 5);
    const double wobble = rng.uniform(0.0, 0.2);
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double u = (ct * dx + st * dy) / ra;
        const double v = (-st * dx + ct * dy) / rb;
        const double r = 1.0 + wobble * std::sin(harmonic * std::atan2(v, u) + phase);
        if (u * u + v * v <= r * r) ind[y * n + x] = 1.0;
      }
    }
  }
  box_blur(ind, n, std::max(1, n / 16));
  std::vector<std::uint8_t> m(ind.size());
  for (std::size_t i = 0; i < ind.size(); ++i) m[i] = ind[i] > 0.5 ? 1 : 0;
  return m;
}

void draw_strokes(Rng& rng, const SynthConfig& cfg, double base, double contrast, std::vector<double>& img) {
  const int n = cfg.image_size;
  const int strokes = rng.range(cfg.strokes_min, cfg.strokes_max);
  for (int s = 0; s < strokes; ++s) {
    const double level = base + contrast * rng.uniform();
    double y = rng.uniform(0.0, n), x = rng.uniform(0.0, n);
    const int segments = rng.range(2, 4);
    double heading = rng.uniform(0.0, 2 * std::numbers::pi);
    for (int k = 0; k < segments; ++k) {
      heading += rng.uniform(-0.8, 0.8);
      const double len = rng.uniform(0.1, 0.3) * n;
      const double ny = y + len * std::sin(heading), nx = x + len * std::cos(heading);
      const int steps = static_cast<int>(std::ceil(len * 2));
      for (int t = 0; t <= steps; ++t) {
        const double a = static_cast<double>(t) / steps;
        const int py = static_cast<int>(std::floor(y + a * (ny - y)));
        const int px = static_cast<int>(std::floor(x + a * (nx - x)));
        if (py >= 0 && py < n && px >= 0 && px < n) img[py * n + px] = level;
      }
      y = ny;
      x = nx;
    }
  }
}

BinaryMap plane_of(const Tensor<float>& t) { return to_binary(t); }

}  // namespace

Sample gen_sample(Rng& rng, const SynthConfig& cfg, std::string id) {
  cfg.validate();
  const int n = cfg.image_size;
  std::vector<std::uint8_t> mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxBlobAttempts) {
      throw NumericError("gen_sample: no non-empty mask after " + std::to_string(kMaxBlobAttempts) + " attempts");
    }
    mask = draw_mask(rng, cfg);
    if (std::count(mask.begin(), mask.end(), std::uint8_t{1}) > 0) break;
  }
  const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  const double base = rng.uniform(0.1, std::max(0.1, 0.95 - contrast));
  std::vector<double> img(mask.size());
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = base + contrast * mask[i];
  draw_strokes(rng, cfg, base, contrast, img);
  if (cfg.noise_std > 0) {
    for (auto& v : img) v += rng.normal(0.0, cfg.noise_std);
  }

  Sample s;
  s.id = std::move(id);
  const std::size_t plane = mask.size();
  std::vector<float> pix(plane * static_cast<std::size_t>(cfg.channels));
  for (int c = 0; c < cfg.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) pix[c * plane + i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
  }
  s.image = Tensor<float>({cfg.channels, n, n}, std::move(pix));
  std::vector<float> m(plane);
  for (std::size_t i = 0; i < plane; ++i) m[i] = mask[i];
  s.mask = Tensor<float>({1, n, n}, std::move(m));
  s.edge = boundary_gt(s.mask, cfg.morph_iters);
  return s;
}

std::vector<Sample> gen_samples(const SynthConfig& cfg, std::uint64_t seed, int count, const std::string& prefix) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", i);
    out.push_back(gen_sample(rng, cfg, prefix + buf));
  }
  return out;
}

AugmentParams draw_augment(Rng& rng, double max_angle_deg) {
  AugmentParams a;
  a.hflip = rng.bernoulli(0.5);
  a.vflip = rng.bernoulli(0.5);
  a.angle_deg = rng.uniform(-max_angle_deg, max_angle_deg);
  return a;
}

namespace {

Tensor<float> flip(const Tensor<float>& t, bool h, bool v) {
  if (!h && !v) return t;
  const int c = t.dim(0), hh = t.dim(1), w = t.dim(2);
  Tensor<float> out(t.shape());
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < hh; ++y) {
      for (int x = 0; x < w; ++x) {
        const int sy = v ? hh - 1 - y : y, sx = h ? w - 1 - x : x;
        out[(static_cast<std::size_t>(k) * hh + y) * w + x] = t[(static_cast<std::size_t>(k) * hh + sy) * w + sx];
      }
    }
  }
  return out;
}

// Rotation about the image centre; samples outside clamp to the border.
Tensor<float> rotate(const Tensor<float>& t, double deg, bool nearest) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const double a = deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor<float> out(t.shape());
  auto px = [&](int k, int y, int x) {
    return t[(static_cast<std::size_t>(k) * h + std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // inverse map of the output pixel
      const double dy = y - cy, dx = x - cx;
      const double sy = ca * dy - sa * dx + cy;
      const double sx = sa * dy + ca * dx + cx;
      for (int k = 0; k < c; ++k) {
        float v;
        if (nearest) {
          v = px(k, static_cast<int>(std::lround(sy)), static_cast<int>(std::lround(sx)));
        } else {
          const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
          const double fy = sy - y0, fx = sx - x0;
          const double top = px(k, y0, x0) * (1 - fx) + px(k, y0, x0 + 1) * fx;
          const double bot = px(k, y0 + 1, x0) * (1 - fx) + px(k, y0 + 1, x0 + 1) * fx;
          v = static_cast<float>(top * (1 - fy) + bot * fy);
        }
        out[(static_cast<std::size_t>(k) * h + y) * w + x] = v;
      }
    }
  }
  return out;
}

}  // namespace

Sample apply_augment(const Sample& s, const AugmentParams& a, int morph_iters) {
  Sample r;
  r.id = s.id;
  r.image = flip(s.image, a.hflip, a.vflip);
  r.mask = flip(s.mask, a.hflip, a.vflip);
  if (a.angle_deg != 0.0) {
    r.image = rotate(r.image, a.angle_deg, false);
    r.mask = rotate(r.mask, a.angle_deg, true);
  }
  r.edge = boundary_gt(r.mask, morph_iters);
  return r;
}

Sample augment(const Sample& s, Rng& rng, int morph_iters) {
  return apply_augment(s, draw_augment(rng), morph_iters);
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& s : ds.samples) {
    if (s.id.empty() || s.id.find_first_of("/\\") != std::string::npos) {
      throw ContractError("dataset: invalid sample id '" + s.id + "'");
    }
    write_tnsr(dir / (s.id + "_img.tnsr"), s.image);
    write_tnsr_u8(dir / (s.id + "_mask.tnsr"), s.mask);
    write_tnsr_u8(dir / (s.id + "_edge.tnsr"), s.edge);
    ids.push_back(s.id);
  }
  nlohmann::json m = {{"format_version", kDatasetFormatVersion},
                      {"config", to_json(ds.config)},
                      {"morphology", {{"structuring_element", "square3"}, {"iters", ds.config.morph_iters}}},
                      {"ids", ids}};
  write_text_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path.string() + ": corrupt manifest: " + e.what());
  }
  Dataset ds;
  try {
    if (m.at("format_version").get<int>() != kDatasetFormatVersion) {
      throw IoError(manifest_path.string() + ": unsupported format_version");
    }
    ds.config = synth_config_from_json(m.at("config"));
    const auto& morph = m.at("morphology");
    if (morph.at("structuring_element").get<std::string>() != "square3" ||
        morph.at("iters").get<int>() != ds.config.morph_iters) {
      throw IoError(manifest_path.string() + ": morphology settings disagree with the config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path.string() + ": malformed manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
  const int n = ds.config.image_size;
  const Shape img_shape{ds.config.channels, n, n}, mask_shape{1, n, n};
  for (const auto& jid : m.at("ids")) {
    Sample s;
    s.id = jid.get<std::string>();
    auto load = [&](const std::string& suffix, const Shape& want) {
      const auto p = dir / (s.id + suffix);
      if (!std::filesystem::exists(p)) throw IoError(p.string() + ": listed in the manifest but missing");
      auto t = read_tnsr(p).to_float();
      if (t.shape() != want) {
        throw IoError(p.string() + ": shape " + shape_str(t.shape()) + " disagrees with the manifest " +
                      shape_str(want));
      }
      return t;
    };
    s.image = load("_img.tnsr", img_shape);
    s.mask = load("_mask.tnsr", mask_shape);
    s.edge = load("_edge.tnsr", mask_shape);
    const auto edge_path = (dir / (s.id + "_edge.tnsr")).string();
    try {
      if (!(plane_of(s.edge) == boundary_gt(plane_of(s.mask), ds.config.morph_iters))) {
        throw IoError(edge_path + ": edge map does not match the mask under the manifest morphology");
      }
    } catch (const ContractError& e) {
      throw IoError(edge_path + ": " + e.what());
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace sgdc
