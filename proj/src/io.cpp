#include "attnprior/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace attnprior::io {

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

struct Sha1 {
  std::uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
  std::uint64_t total = 0;
  unsigned char block[64];
  size_t fill = 0;

  static std::uint32_t rol(std::uint32_t x, int s) { return (x << s) | (x >> (32 - s)); }

  void process(const unsigned char* p) {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = (std::uint32_t(p[4 * i]) << 24) | (std::uint32_t(p[4 * i + 1]) << 16) |
             (std::uint32_t(p[4 * i + 2]) << 8) | std::uint32_t(p[4 * i + 3]);
    for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const std::uint32_t tmp = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = tmp;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }

  void update(const unsigned char* data, size_t n) {
    total += n;
    while (n > 0) {
      const size_t take = std::min(n, sizeof(block) - fill);
      std::memcpy(block + fill, data, take);
      fill += take;
      data += take;
      n -= take;
      if (fill == 64) {
        process(block);
        fill = 0;
      }
    }
  }

  std::string hex() {
    const std::uint64_t bits = total * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (fill != 56) update(&zero, 1);
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
    update(len, 8);
    char out[41];
    for (int i = 0; i < 5; ++i) std::snprintf(out + 8 * i, 9, "%08x", h[i]);
    return std::string(out, 40);
  }
};

}  // namespace

std::string sha1_hex(const unsigned char* data, std::size_t n) {
  Sha1 s;
  s.update(data, n);
  return s.hex();
}

std::string git_blob_sha1(const std::string& content) {
  Sha1 s;
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  s.update(reinterpret_cast<const unsigned char*>(header.data()), header.size());
  s.update(reinterpret_cast<const unsigned char*>(content.data()), content.size());
  return s.hex();
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : out_(path, std::ios::binary), n_cols_(header.size()) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  for (size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
  out_ << '\n';
}

void CsvWriter::row(const std::vector<double>& values) {
  if (values.size() != n_cols_) throw std::runtime_error("csv row width mismatch");
  for (size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_g17(values[i]);
  out_ << '\n';
}

void CsvWriter::row_mixed(const std::vector<std::string>& cells) {
  if (cells.size() != n_cols_) throw std::runtime_error("csv row width mismatch");
  for (size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
  out_ << '\n';
}

CsvWriter::~CsvWriter() = default;

SvgPlot::SvgPlot(int width, int height, std::string title, std::string xlabel, std::string ylabel)
    : w_(width), h_(height), title_(std::move(title)), xlabel_(std::move(xlabel)),
      ylabel_(std::move(ylabel)) {}

void SvgPlot::add_line(const std::vector<double>& xs, const std::vector<double>& ys,
                       const std::string& color, const std::string& label) {
  series_.push_back({xs, ys, color, label, false});
}

void SvgPlot::add_scatter(const std::vector<double>& xs, const std::vector<double>& ys,
                          const std::string& color, const std::string& label) {
  series_.push_back({xs, ys, color, label, true});
}

void SvgPlot::save(const std::string& path) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series_)
    for (size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      xmin = std::min(xmin, s.xs[i]);
      xmax = std::max(xmax, s.xs[i]);
      ymin = std::min(ymin, s.ys[i]);
      ymax = std::max(ymax, s.ys[i]);
    }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ml = 60, mr = 20, mt = 30, mb = 45;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w_ - ml - mr); };
  auto py = [&](double y) { return h_ - mb - (y - ymin) / (ymax - ymin) * (h_ - mt - mb); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << w_ / 2 << "\" y=\"16\" text-anchor=\"middle\" font-size=\"13\">" << title_
      << "</text>\n";
  // axes
  svg << "<line x1=\"" << ml << "\" y1=\"" << h_ - mb << "\" x2=\"" << w_ - mr << "\" y2=\""
      << h_ - mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h_ - mb
      << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    char xbuf[32], ybuf[32];
    std::snprintf(xbuf, sizeof(xbuf), "%.3g", xv);
    std::snprintf(ybuf, sizeof(ybuf), "%.3g", yv);
    svg << "<text x=\"" << px(xv) << "\" y=\"" << h_ - mb + 16
        << "\" text-anchor=\"middle\">" << xbuf << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << ybuf
        << "</text>\n";
  }
  svg << "<text x=\"" << w_ / 2 << "\" y=\"" << h_ - 8 << "\" text-anchor=\"middle\">" << xlabel_
      << "</text>\n";
  svg << "<text x=\"14\" y=\"" << h_ / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << h_ / 2 << ")\">" << ylabel_ << "</text>\n";

  int legend_y = mt + 8;
  for (const auto& s : series_) {
    if (s.scatter) {
      for (size_t i = 0; i < s.xs.size(); ++i) {
        if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
        svg << "<circle cx=\"" << px(s.xs[i]) << "\" cy=\"" << py(s.ys[i])
            << "\" r=\"1.6\" fill=\"" << s.color << "\"/>\n";
      }
    } else {
      svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.4\" points=\"";
      for (size_t i = 0; i < s.xs.size(); ++i) {
        if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
        svg << px(s.xs[i]) << ',' << py(s.ys[i]) << ' ';
      }
      svg << "\"/>\n";
    }
    if (!s.label.empty()) {
      svg << "<rect x=\"" << w_ - mr - 130 << "\" y=\"" << legend_y - 8
          << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n";
      svg << "<text x=\"" << w_ - mr - 115 << "\" y=\"" << legend_y + 1 << "\">" << s.label
          << "</text>\n";
      legend_y += 16;
    }
  }
  svg << "</svg>\n";
  write_text_file(path, svg.str());
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'A', 'T', 'N', 'P', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated");
  return v;
}

void put_string(std::ofstream& out, const std::string& s) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string get_string(std::ifstream& in) {
  const auto n = get<std::uint16_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return s;
}

}  // namespace

template <class S>
void save_checkpoint(const std::string& path, lm::SmallGPT<S>& model,
                     const lm::CharVocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kMagic, 8);
  put<std::uint32_t>(out, 1);  // version
  put<std::uint8_t>(out, sizeof(S));
  const auto& cfg = model.config();
  put<std::int64_t>(out, cfg.d_model);
  put<std::int64_t>(out, cfg.n_heads);
  put<std::int64_t>(out, cfg.n_layers);
  put<std::int64_t>(out, cfg.context);
  put<std::int64_t>(out, cfg.vocab);
  put<std::uint8_t>(out, cfg.tied_embeddings ? 1 : 0);

  auto named = model.named_params();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(named.size()));
  for (auto& [name, t] : named) {
    put_string(out, name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t->shape.size()));
    for (Index d : t->shape) put<std::int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(S)));
  }

  put<std::uint32_t>(out, static_cast<std::uint32_t>(vocab.chars().size()));
  for (std::uint32_t cp : vocab.chars()) put<std::uint32_t>(out, cp);
  put<std::int32_t>(out, vocab.min_count());
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

template <class S>
LoadedCheckpoint load_checkpoint(const std::string& path, lm::SmallGPT<S>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  if (get<std::uint32_t>(in) != 1) throw std::runtime_error("unsupported checkpoint version");
  if (get<std::uint8_t>(in) != sizeof(S))
    throw std::runtime_error("checkpoint scalar width does not match this build");

  lm::GptConfig cfg;
  cfg.d_model = get<std::int64_t>(in);
  cfg.n_heads = get<std::int64_t>(in);
  cfg.n_layers = get<std::int64_t>(in);
  cfg.context = get<std::int64_t>(in);
  cfg.vocab = static_cast<int>(get<std::int64_t>(in));
  cfg.tied_embeddings = get<std::uint8_t>(in) != 0;
  model = lm::SmallGPT<S>(cfg, 0);

  auto named = model.named_params();
  const auto n_tensors = get<std::uint32_t>(in);
  if (n_tensors != named.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = get_string(in);
    const auto ndim = get<std::uint8_t>(in);
    Shape shape(ndim);
    for (auto& d : shape) d = get<std::int64_t>(in);
    TensorT<S>* target = nullptr;
    for (auto& [pname, t] : named)
      if (pname == name) target = t;
    if (target == nullptr) throw std::runtime_error("unknown tensor in checkpoint: " + name);
    if (target->shape != shape) throw std::runtime_error("shape mismatch for tensor " + name);
    in.read(reinterpret_cast<char*>(target->data.data()),
            static_cast<std::streamsize>(target->data.size() * sizeof(S)));
    if (!in) throw std::runtime_error("checkpoint truncated in tensor " + name);
  }

  const auto n_chars = get<std::uint32_t>(in);
  std::vector<std::uint32_t> chars(n_chars);
  for (auto& cp : chars) cp = get<std::uint32_t>(in);
  const int min_count = get<std::int32_t>(in);
  LoadedCheckpoint loaded;
  loaded.config = cfg;
  loaded.vocab = lm::CharVocab::from_table(std::move(chars), min_count);
  return loaded;
}

template void save_checkpoint<float>(const std::string&, lm::SmallGPT<float>&,
                                     const lm::CharVocab&);
template void save_checkpoint<double>(const std::string&, lm::SmallGPT<double>&,
                                      const lm::CharVocab&);
template LoadedCheckpoint load_checkpoint<float>(const std::string&, lm::SmallGPT<float>&);
template LoadedCheckpoint load_checkpoint<double>(const std::string&, lm::SmallGPT<double>&);

}  // namespace attnprior::io
