// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pfls/experiment.hpp"

namespace pfls {
namespace {

using json = nlohmann::json;

unsigned char to_byte(float v) {
  const float scaled = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 0.5f * 255.0f;
  return static_cast<unsigned char>(std::lround(scaled));
}

// Skips whitespace and '#' comment lines between PGM header tokens.
int next_pgm_int(std::istream& in, const std::string& file) {
  while (true) {
    const int c = in.peek();
    if (c == EOF) throw DataError("truncated PGM header in '" + file + "'");
    if (std::isspace(c)) {
      in.get();
    } else if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      break;
    }
  }
  int value = 0;
  if (!(in >> value)) throw DataError("malformed PGM header in '" + file + "'");
  return value;
}

struct SampleRow {
  std::string key;
  std::filesystem::path src, ref, out;
  bool complete() const { return !src.empty() && !ref.empty() && !out.empty(); }
};

std::string svg_point(double x, double y) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f,%.2f", x, y);
  return buf;
}

void write_similarity_svg(const std::filesystem::path& run_dir) {
  const std::filesystem::path sim_path = run_dir / "similarity.json";
  if (!std::filesystem::exists(sim_path)) {
    std::cerr << "plots: no similarity.json in '" << run_dir.string()
              << "', skipping similarity.svg\n";
    return;
  }
  std::ifstream in(sim_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed '" + sim_path.string() + "': " + e.what());
  }
  const auto stages = j.at("stages").get<std::vector<std::string>>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto stddev = j.at("stddev").get<std::vector<double>>();
  if (stages.empty() || stages.size() != mean.size() || mean.size() != stddev.size()) {
    throw DataError("inconsistent arrays in '" + sim_path.string() + "'");
  }

  const double width = 640.0, height = 400.0;
  const double left = 70.0, right = 20.0, top = 20.0, bottom = 60.0;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;

  double lo = 1.0, hi = -1.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    lo = std::min(lo, mean[i] - stddev[i]);
    hi = std::max(hi, mean[i] + stddev[i]);
  }
  const double pad = std::max(0.05, (hi - lo) * 0.1);
  lo = std::max(-1.05, lo - pad);
  hi = std::min(1.05, hi + pad);

  const auto x_at = [&](std::size_t i) {
    if (stages.size() == 1) return left + plot_w / 2.0;
    return left + plot_w * static_cast<double>(i) / static_cast<double>(stages.size() - 1);
  };
  const auto y_at = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w
      << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";

  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = y_at(v);
    char label[32];
    std::snprintf(label, sizeof(label), "%.2f", v);
    svg << "<line x1=\"" << left - 4 << "\" y1=\"" << y << "\" x2=\"" << left << "\" y2=\"" << y
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << y + 4
        << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" << label
        << "</text>\n";
  }

  std::string points;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const double x = x_at(i);
    const double y0 = y_at(std::max(lo, mean[i] - stddev[i]));
    const double y1 = y_at(std::min(hi, mean[i] + stddev[i]));
    svg << "<line x1=\"" << x << "\" y1=\"" << y0 << "\" x2=\"" << x << "\" y2=\"" << y1
        << "\" stroke=\"#4477aa\" stroke-width=\"1.5\"/>\n";
    if (!points.empty()) points += ' ';
    points += svg_point(x, y_at(mean[i]));
    svg << "<text x=\"" << x << "\" y=\"" << top + plot_h + 16
        << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">" << stages[i]
        << "</text>\n";
  }
  svg << "<polyline points=\"" << points
      << "\" fill=\"none\" stroke=\"#4477aa\" stroke-width=\"2\"/>\n";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    svg << "<circle cx=\"" << x_at(i) << "\" cy=\"" << y_at(mean[i])
        << "\" r=\"3\" fill=\"#4477aa\"/>\n";
  }
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 14
      << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">"
      << "generator stage</text>\n";
  svg << "<text x=\"16\" y=\"" << top + plot_h / 2
      << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "transform=\"rotate(-90 16 " << top + plot_h / 2 << ")\">"
      << "cross-site rank correlation</text>\n";
  svg << "</svg>\n";

  std::ofstream out(run_dir / "similarity.svg");
  if (!out) throw DataError("cannot write similarity.svg");
  out << svg.str();
}

void write_samples_grid(const std::filesystem::path& run_dir) {
  const std::filesystem::path samples_dir = run_dir / "samples";
  std::map<std::string, SampleRow> rows;
  if (std::filesystem::is_directory(samples_dir)) {
    for (const auto& entry : std::filesystem::directory_iterator(samples_dir)) {
      const std::string stem = entry.path().stem().string();
      if (entry.path().extension() != ".pgm") continue;
      const auto cut = stem.rfind('_');
      if (cut == std::string::npos) continue;
      const std::string key = stem.substr(0, cut);
      const std::string role = stem.substr(cut + 1);
      SampleRow& row = rows[key];
      row.key = key;
      if (role == "src") row.src = entry.path();
      else if (role == "ref") row.ref = entry.path();
      else if (role == "out") row.out = entry.path();
    }
  }
  std::vector<const SampleRow*> ordered;
  for (const auto& [key, row] : rows) {
    if (row.complete()) ordered.push_back(&row);
  }
  if (ordered.empty()) {
    std::cerr << "plots: no complete sample triples in '" << samples_dir.string()
              << "', skipping samples_grid.pgm\n";
    return;
  }

  const Tensor first = read_pgm(ordered.front()->src);
  const int h = first.dim(0), w = first.dim(1);
  const int sep = 2;
  const int grid_h = static_cast<int>(ordered.size()) * h +
                     (static_cast<int>(ordered.size()) - 1) * sep;
  const int grid_w = 3 * w + 2 * sep;
  Tensor grid({grid_h, grid_w});
  std::fill(grid.data(), grid.data() + grid.size(), 1.0f);

  const auto blit = [&](const Tensor& img, int y0, int x0) {
    if (img.dim(0) != h || img.dim(1) != w) {
      throw DataError("sample images disagree on size under '" + samples_dir.string() + "'");
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        grid.data()[(y0 + y) * grid_w + (x0 + x)] = img.data()[y * w + x];
      }
    }
  };
  for (std::size_t r = 0; r < ordered.size(); ++r) {
    const int y0 = static_cast<int>(r) * (h + sep);
    blit(read_pgm(ordered[r]->src), y0, 0);
    blit(read_pgm(ordered[r]->ref), y0, w + sep);
    blit(read_pgm(ordered[r]->out), y0, 2 * (w + sep));
  }
  write_pgm(grid, run_dir / "samples_grid.pgm");
}

}  // namespace

void write_pgm(const Tensor& image, const std::filesystem::path& path) {
  int h = 0, w = 0;
  if (image.rank() == 2) {
    h = image.dim(0);
    w = image.dim(1);
  } else if (image.rank() == 3 && image.dim(0) == 1) {
    h = image.dim(1);
    w = image.dim(2);
  } else {
    throw ShapeError("write_pgm expects a single-channel image");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image.data()[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError("'" + path.string() + "' is not a binary PGM");
  const int w = next_pgm_int(in, path.string());
  const int h = next_pgm_int(in, path.string());
  const int maxval = next_pgm_int(in, path.string());
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw DataError("unsupported PGM header in '" + path.string() + "'");
  }
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError("truncated PGM payload in '" + path.string() + "'");
  }
  Tensor image({h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    image.data()[i] = 2.0f * static_cast<float>(bytes[i]) / static_cast<float>(maxval) - 1.0f;
  }
  return image;
}

void emit_plots(const std::filesystem::path& run_dir) {
  if (!std::filesystem::is_directory(run_dir)) {
    throw ConfigError("'" + run_dir.string() + "' is not a run directory");
  }
  write_similarity_svg(run_dir);
  write_samples_grid(run_dir);
}

}  // namespace pfls
