#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "attnprior/gpt.hpp"
#include "attnprior/lm.hpp"

namespace attnprior::io {

/// 17-significant-digit decimal rendering; '.' separator, no locale.
std::string format_g17(double v);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

/// SHA-1 of a git blob header plus content ("blob <len>\0<bytes>"), the same
/// content id git would assign the corpus file.
std::string git_blob_sha1(const std::string& content);
std::string sha1_hex(const unsigned char* data, std::size_t n);

/// CSV with a header row, '\n' line endings, 17-significant-digit reals.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<double>& values);
  void row_mixed(const std::vector<std::string>& cells);
  ~CsvWriter();

 private:
  std::ofstream out_;
  size_t n_cols_;
};

/// Line/scatter SVG plots, fully deterministic (no timestamps or ids).
class SvgPlot {
 public:
  SvgPlot(int width, int height, std::string title, std::string xlabel, std::string ylabel);
  void add_line(const std::vector<double>& xs, const std::vector<double>& ys,
                const std::string& color, const std::string& label);
  void add_scatter(const std::vector<double>& xs, const std::vector<double>& ys,
                   const std::string& color, const std::string& label);
  void save(const std::string& path);

 private:
  struct Series {
    std::vector<double> xs, ys;
    std::string color, label;
    bool scatter = false;
  };
  int w_, h_;
  std::string title_, xlabel_, ylabel_;
  std::vector<Series> series_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, scalar width, config, shape-tagged
// tensors by name, vocab table.

template <class S>
void save_checkpoint(const std::string& path, lm::SmallGPT<S>& model, const lm::CharVocab& vocab);

struct LoadedCheckpoint {
  lm::GptConfig config;
  lm::CharVocab vocab;
};

template <class S>
LoadedCheckpoint load_checkpoint(const std::string& path, lm::SmallGPT<S>& model);

}  // namespace attnprior::io
