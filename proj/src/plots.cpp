#include "mbafl/plots.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <png.h>

#include "mbafl/errors.hpp"

namespace mbafl {

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Frame {
  double x0 = 60, y0 = 20, w = 640, h = 360;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;

  double x(double v) const { return x0 + (xmax > xmin ? (v - xmin) / (xmax - xmin) : 0.5) * w; }
  double y(double v) const { return y0 + h - (ymax > ymin ? (v - ymin) / (ymax - ymin) : 0.5) * h; }
};

}  // namespace

// Kept free of C++ objects with destructors: libpng reports errors via longjmp.
static bool write_png_rows(FILE* fp, const std::uint8_t* src, int w, int c, int upscale, int H, int W, png_byte* row) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
               c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int yy = 0; yy < H; ++yy) {
    for (int xx = 0; xx < W; ++xx) {
      for (int k = 0; k < c; ++k) row[xx * c + k] = src[((yy / upscale) * w + xx / upscale) * c + k];
    }
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

void write_png(const torch::Tensor& image, const std::filesystem::path& path, int upscale) {
  if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) throw ShapeError("write_png expects [1|3,H,W]");
  if (upscale < 1) upscale = 1;
  const auto c = static_cast<int>(image.size(0));
  const auto hw = image.detach().to(torch::kFloat).permute({1, 2, 0}).mul(255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  const auto h = static_cast<int>(image.size(1)), w = static_cast<int>(image.size(2));
  const int H = h * upscale, W = w * upscale;
  std::vector<png_byte> row(static_cast<std::size_t>(W * c));
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  const bool ok = write_png_rows(fp, hw.data_ptr<std::uint8_t>(), w, c, upscale, H, W, row.data());
  std::fclose(fp);
  if (!ok) throw IoError("libpng failed on " + path.string());
}

std::string asr_curve_svg(const std::vector<RoundRecord>& records, std::int64_t window_start,
                          std::int64_t window_end) {
  if (records.empty()) throw ReportError("no records to plot");
  Frame f;
  f.xmin = static_cast<double>(records.front().round);
  f.xmax = static_cast<double>(records.back().round);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"820\" height=\"430\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"820\" height=\"430\" fill=\"white\"/>\n";
  if (window_end > window_start) {
    const double a = f.x(std::max<double>(f.xmin, window_start)), b = f.x(std::min<double>(f.xmax, window_end));
    s << "<rect x=\"" << fmt(a) << "\" y=\"" << f.y0 << "\" width=\"" << fmt(std::max(0.0, b - a)) << "\" height=\"" << f.h
      << "\" fill=\"#eeeeee\"/>\n";
  }
  s << "<rect x=\"" << f.x0 << "\" y=\"" << f.y0 << "\" width=\"" << f.w << "\" height=\"" << f.h
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = k / 4.0;
    s << "<text x=\"" << f.x0 - 8 << "\" y=\"" << fmt(f.y(v) + 4) << "\" text-anchor=\"end\">" << fmt(v) << "</text>\n";
  }
  s << "<text x=\"" << f.x0 << "\" y=\"" << f.y0 + f.h + 18 << "\">" << records.front().round << "</text>\n";
  s << "<text x=\"" << f.x0 + f.w << "\" y=\"" << f.y0 + f.h + 18 << "\" text-anchor=\"end\">" << records.back().round
    << "</text>\n";
  s << "<text x=\"" << f.x0 + f.w / 2 << "\" y=\"" << f.y0 + f.h + 18 << "\" text-anchor=\"middle\">round</text>\n";

  const auto k = records.back().asr.size();
  auto polyline = [&](auto value, const std::string& colour, const char* dash) {
    s << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\"" << dash << " points=\"";
    for (const auto& r : records) {
      if (r.asr.size() != k) continue;
      s << fmt(f.x(static_cast<double>(r.round))) << "," << fmt(f.y(value(r))) << " ";
    }
    s << "\"/>\n";
  };
  for (std::size_t a = 0; a < k; ++a) {
    polyline([a](const RoundRecord& r) { return r.asr[a]; }, kPalette[a % 10], "");
  }
  polyline([](const RoundRecord& r) { return r.asr_mean; }, "black", " stroke-dasharray=\"6,4\"");
  polyline([](const RoundRecord& r) { return r.accuracy; }, "#999999", " stroke-dasharray=\"2,3\"");

  double ly = f.y0 + 10;
  auto legend = [&](const std::string& label, const std::string& colour) {
    s << "<line x1=\"" << f.x0 + f.w + 10 << "\" y1=\"" << ly << "\" x2=\"" << f.x0 + f.w + 30 << "\" y2=\"" << ly
      << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>";
    s << "<text x=\"" << f.x0 + f.w + 34 << "\" y=\"" << ly + 4 << "\">" << label << "</text>\n";
    ly += 18;
  };
  for (std::size_t a = 0; a < k; ++a) legend("attacker " + std::to_string(a), kPalette[a % 10]);
  legend("mean ASR", "black");
  legend("accuracy", "#999999");
  s << "</svg>\n";
  return s.str();
}

std::string distribution_svg(const EmbeddingTable& table, const Projection& projection) {
  Frame f;
  f.h = 480;
  f.w = 480;
  const auto& p = projection.points;
  if (p.rows() == 0) throw ReportError("empty projection");
  f.xmin = p.col(0).minCoeff();
  f.xmax = p.col(0).maxCoeff();
  f.ymin = p.col(1).minCoeff();
  f.ymax = p.col(1).maxCoeff();
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"700\" height=\"540\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"700\" height=\"540\" fill=\"white\"/>\n";
  s << "<rect x=\"" << f.x0 << "\" y=\"" << f.y0 << "\" width=\"" << f.w << "\" height=\"" << f.h
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  std::map<std::string, int> attacker_shade;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto& kind = table.kind[static_cast<std::size_t>(i)];
    const double x = f.x(p(i, 0)), y = f.y(p(i, 1));
    if (kind == "clean") {
      const auto colour = kPalette[table.label[static_cast<std::size_t>(i)] % 10];
      s << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"2.5\" fill=\"" << colour << "\" fill-opacity=\"0.6\"/>\n";
    } else {
      const auto it = attacker_shade.emplace(kind, static_cast<int>(attacker_shade.size())).first;
      const auto colour = it->second == 0 ? "black" : (it->second == 1 ? "#555555" : "#aa0000");
      s << "<path d=\"M" << fmt(x - 3) << "," << fmt(y - 3) << "L" << fmt(x + 3) << "," << fmt(y + 3) << "M" << fmt(x - 3)
        << "," << fmt(y + 3) << "L" << fmt(x + 3) << "," << fmt(y - 3) << "\" stroke=\"" << colour << "\"/>\n";
    }
  }
  double ly = f.y0 + 10;
  for (int c = 0; c < 10; ++c) {
    s << "<circle cx=\"" << f.x0 + f.w + 20 << "\" cy=\"" << ly << "\" r=\"4\" fill=\"" << kPalette[c] << "\"/>";
    s << "<text x=\"" << f.x0 + f.w + 30 << "\" y=\"" << ly + 4 << "\">class " << c << "</text>\n";
    ly += 16;
  }
  for (const auto& [kind, shade] : attacker_shade) {
    const auto colour = shade == 0 ? "black" : (shade == 1 ? "#555555" : "#aa0000");
    s << "<text x=\"" << f.x0 + f.w + 14 << "\" y=\"" << ly + 4 << "\" fill=\"" << colour << "\">x " << kind << "</text>\n";
    ly += 16;
  }
  if (projection.rank_deficient) {
    s << "<text x=\"" << f.x0 << "\" y=\"" << f.y0 + f.h + 20 << "\">rank-deficient projection</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace mbafl
