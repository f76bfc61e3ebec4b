#include "l4seg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace l4s {

void write_pgm(const std::string& path, const GrayImage& img) {
  std::ostringstream os;
  os << "P5\n" << img.w << " " << img.h << "\n255\n";
  std::string header = os.str();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Err::io, "cannot write " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (!out) fail(Err::io, "short write: " + path);
}

namespace {

// next PGM header token, skipping whitespace and '#' comments
std::string pgm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) fail(Err::io, "malformed PGM header: " + path);
  return tok;
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Err::io, "cannot open " + path);
  if (pgm_token(in, path) != "P5") fail(Err::io, "not a binary PGM (P5): " + path);
  GrayImage img;
  try {
    img.w = std::stoll(pgm_token(in, path));
    img.h = std::stoll(pgm_token(in, path));
    long long maxval = std::stoll(pgm_token(in, path));
    if (maxval != 255) fail(Err::io, "PGM maxval must be 255: " + path);
  } catch (const std::logic_error&) {
    fail(Err::io, "malformed PGM header: " + path);
  }
  if (img.w <= 0 || img.h <= 0) fail(Err::io, "bad PGM extents: " + path);
  img.px.resize(static_cast<size_t>(img.w * img.h));
  in.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.px.size()))
    fail(Err::io, "truncated PGM payload: " + path);
  return img;
}

int64_t Sample::mask_area() const {
  int64_t n = 0;
  for (uint8_t v : mask) n += v;
  return n;
}

// ---------------------------------------------------------------------------
// generator: smoothed value-noise + speckle background, 1-3 bright ellipses
// with blurred edges as foreground

namespace {

struct Ellipse {
  double cx, cy, ax, ay, rot;
};

std::vector<double> value_noise(Rng& rng, int64_t size, int64_t cells) {
  // coarse uniform grid, bilinear upsampled
  std::vector<double> grid(static_cast<size_t>((cells + 1) * (cells + 1)));
  for (double& v : grid) v = rng.uniform();
  std::vector<double> img(static_cast<size_t>(size * size));
  double scale = static_cast<double>(cells) / static_cast<double>(size);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      double gy = y * scale, gx = x * scale;
      int64_t y0 = static_cast<int64_t>(gy), x0 = static_cast<int64_t>(gx);
      double fy = gy - y0, fx = gx - x0;
      auto at = [&](int64_t yy, int64_t xx) { return grid[static_cast<size_t>(yy * (cells + 1) + xx)]; };
      double top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx;
      double bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx;
      img[static_cast<size_t>(y * size + x)] = top * (1 - fy) + bot * fy;
    }
  return img;
}

// signed "radius" of a point relative to the ellipse: < 1 inside
double ellipse_r(const Ellipse& e, double x, double y) {
  double dx = x - e.cx, dy = y - e.cy;
  double c = std::cos(e.rot), s = std::sin(e.rot);
  double u = dx * c + dy * s, v = -dx * s + dy * c;
  return std::sqrt((u / e.ax) * (u / e.ax) + (v / e.ay) * (v / e.ay));
}

}  // namespace

Sample gen_sample(Rng& rng, int64_t size, const std::string& id) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    // background: two octaves of value noise + multiplicative speckle
    std::vector<double> bg1 = value_noise(rng, size, 4);
    std::vector<double> bg2 = value_noise(rng, size, 8);
    std::vector<double> img(static_cast<size_t>(size * size));
    for (size_t i = 0; i < img.size(); ++i) {
      double v = 0.28 * bg1[i] + 0.14 * bg2[i] + 0.08;
      double speckle = 1.0 + 0.35 * (rng.uniform() - 0.5);
      img[i] = v * speckle;
    }

    int64_t n_ell = rng.uniform_int(1, 3);
    std::vector<Ellipse> ells;
    for (int64_t e = 0; e < n_ell; ++e) {
      Ellipse el;
      el.ax = rng.uniform(0.08, 0.22) * static_cast<double>(size);
      el.ay = rng.uniform(0.08, 0.22) * static_cast<double>(size);
      el.cx = rng.uniform(0.18, 0.82) * static_cast<double>(size);
      el.cy = rng.uniform(0.18, 0.82) * static_cast<double>(size);
      el.rot = rng.uniform(0.0, M_PI);
      ells.push_back(el);
    }
    double edge = rng.uniform(0.06, 0.14);        // blurred edge width, relative
    double intensity = rng.uniform(0.38, 0.55);   // foreground offset

    std::vector<uint8_t> mask(static_cast<size_t>(size * size), 0);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double soft = 0.0;
        bool inside = false;
        for (const Ellipse& el : ells) {
          double r = ellipse_r(el, x + 0.5, y + 0.5);
          if (r < 1.0) inside = true;
          // smooth falloff across [1-edge, 1+edge]
          double t = (1.0 + edge - r) / (2.0 * edge);
          soft = std::max(soft, std::clamp(t, 0.0, 1.0));
        }
        size_t i = static_cast<size_t>(y * size + x);
        img[i] += intensity * soft;
        if (inside) mask[i] = 1;
      }

    int64_t area = 0;
    for (uint8_t v : mask) area += v;
    int64_t total = size * size;
    if (area == 0 || area == total || area < total / 50 || area > total / 2)
      continue;  // degenerate draw: regenerate

    GrayImage gi;
    gi.w = size;
    gi.h = size;
    gi.px.resize(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) {
      double v = std::clamp(img[static_cast<size_t>(i)], 0.0, 1.0);
      gi.px[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(v * 255.0));
    }

    Sample s;
    s.id = id;
    s.h = size;
    s.w = size;
    s.mask = std::move(mask);
    s.image = Tensor::zeros({1, size, size}, Dtype::F32);
    auto* p = s.image.data_mut<float>();
    for (int64_t i = 0; i < total; ++i) p[i] = static_cast<float>(gi.px[static_cast<size_t>(i)]) / 255.0f;
    return s;
  }
  fail(Err::runtime, "gen_sample: no acceptable draw after 64 attempts");
}

void gen_synthetic(uint64_t seed, int64_t n, int64_t size, const std::string& out_dir) {
  if (n < 1) fail(Err::usage, "gen_synthetic: n must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(Err::io, "cannot create " + out_dir + ": " + ec.message());

  Rng rng(splitmix64(seed ^ 0x64617461ull));
  json manifest = json::array();
  for (int64_t i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "%05lld", static_cast<long long>(i));
    Sample s = gen_sample(rng, size, id);

    GrayImage img{size, size, std::vector<uint8_t>(static_cast<size_t>(size * size))};
    const auto* p = s.image.data<float>();
    for (int64_t j = 0; j < size * size; ++j)
      img.px[static_cast<size_t>(j)] = static_cast<uint8_t>(std::lround(p[j] * 255.0f));
    GrayImage msk{size, size, std::vector<uint8_t>(static_cast<size_t>(size * size))};
    for (int64_t j = 0; j < size * size; ++j)
      msk.px[static_cast<size_t>(j)] = s.mask[static_cast<size_t>(j)] ? 255 : 0;

    std::string img_rel = std::string(id) + "_img.pgm";
    std::string msk_rel = std::string(id) + "_mask.pgm";
    write_pgm((fs::path(out_dir) / img_rel).string(), img);
    write_pgm((fs::path(out_dir) / msk_rel).string(), msk);
    manifest.push_back({{"image", img_rel}, {"mask", msk_rel}});
  }
  std::string text = manifest.dump(2);
  text.push_back('\n');
  write_file_bytes((fs::path(out_dir) / "manifest.json").string(), text.data(), text.size());
}

std::vector<Sample> load_dataset(const std::string& dir) {
  fs::path mp = fs::path(dir) / "manifest.json";
  if (!fs::exists(mp)) fail(Err::io, "no manifest.json in " + dir);
  json manifest;
  try {
    auto bytes = read_file_bytes(mp.string());
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(Err::io, std::string("malformed manifest: ") + e.what());
  }
  if (!manifest.is_array()) fail(Err::io, "manifest must be a JSON array");
  std::vector<Sample> out;
  for (const json& e : manifest) {
    std::string img_rel = e.at("image").get<std::string>();
    std::string msk_rel = e.at("mask").get<std::string>();
    GrayImage img = read_pgm((fs::path(dir) / img_rel).string());
    GrayImage msk = read_pgm((fs::path(dir) / msk_rel).string());
    if (img.w != msk.w || img.h != msk.h)
      fail(Err::shape_mismatch, "image/mask extent mismatch for " + img_rel + ": " +
                                    std::to_string(img.w) + "x" + std::to_string(img.h) + " vs " +
                                    std::to_string(msk.w) + "x" + std::to_string(msk.h));
    Sample s;
    s.id = img_rel.substr(0, img_rel.find('_'));
    s.h = img.h;
    s.w = img.w;
    s.image = Tensor::zeros({1, img.h, img.w}, Dtype::F32);
    auto* p = s.image.data_mut<float>();
    for (size_t i = 0; i < img.px.size(); ++i) p[i] = static_cast<float>(img.px[i]) / 255.0f;
    s.mask.resize(msk.px.size());
    for (size_t i = 0; i < msk.px.size(); ++i) s.mask[i] = msk.px[i] >= 128 ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// metrics

namespace {

void check_mask_pair(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  if (a.size() != b.size())
    fail(Err::shape_mismatch, "metric: mask sizes differ: " + std::to_string(a.size()) + " vs " +
                                  std::to_string(b.size()));
}

}  // namespace

double iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check_mask_pair(pred, gt);
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g);
    uni += (p || g);
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double f1(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check_mask_pair(pred, gt);
  int64_t inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g);
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

}  // namespace l4s
