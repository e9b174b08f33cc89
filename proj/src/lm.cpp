#include "attnprior/lm.hpp"

#include <algorithm>
#include <map>

namespace attnprior::lm {

std::vector<std::uint32_t> decode_utf8(const std::string& text) {
  std::vector<std::uint32_t> cps;
  cps.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    const unsigned char b0 = static_cast<unsigned char>(text[i]);
    std::uint32_t cp;
    size_t len;
    if (b0 < 0x80) {
      cp = b0;
      len = 1;
    } else if ((b0 & 0xE0) == 0xC0) {
      cp = b0 & 0x1F;
      len = 2;
    } else if ((b0 & 0xF0) == 0xE0) {
      cp = b0 & 0x0F;
      len = 3;
    } else if ((b0 & 0xF8) == 0xF0) {
      cp = b0 & 0x07;
      len = 4;
    } else {
      cp = 0xFFFD;  // stray continuation byte
      len = 1;
    }
    if (i + len > text.size()) {
      cps.push_back(0xFFFD);
      break;
    }
    bool ok = true;
    for (size_t k = 1; k < len; ++k) {
      const unsigned char bk = static_cast<unsigned char>(text[i + k]);
      if ((bk & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (bk & 0x3F);
    }
    if (!ok) {
      cps.push_back(0xFFFD);
      i += 1;
    } else {
      cps.push_back(cp);
      i += len;
    }
  }
  return cps;
}

namespace {

void encode_utf8(std::uint32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace

CharVocab CharVocab::build(const std::string& utf8_text, int min_count) {
  if (utf8_text.empty()) throw IngestionError("cannot build a vocabulary from an empty corpus");
  const auto cps = decode_utf8(utf8_text);
  std::map<std::uint32_t, long> counts;  // ordered map fixes codepoint tiebreaks
  for (std::uint32_t cp : cps) ++counts[cp];
  std::vector<std::pair<std::uint32_t, long>> kept;
  for (const auto& [cp, c] : counts)
    if (c >= min_count) kept.emplace_back(cp, c);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  CharVocab v;
  v.min_count_ = min_count;
  for (const auto& [cp, c] : kept) {
    v.char_to_id_[cp] = static_cast<int>(v.id_to_char_.size());
    v.id_to_char_.push_back(cp);
  }
  return v;
}

CharVocab CharVocab::from_table(std::vector<std::uint32_t> chars, int min_count) {
  CharVocab v;
  v.min_count_ = min_count;
  v.id_to_char_ = std::move(chars);
  for (size_t i = 0; i < v.id_to_char_.size(); ++i)
    v.char_to_id_[v.id_to_char_[i]] = static_cast<int>(i);
  return v;
}

std::vector<int> CharVocab::encode(const std::string& utf8_text) const {
  const auto cps = decode_utf8(utf8_text);
  std::vector<int> ids;
  ids.reserve(cps.size());
  for (std::uint32_t cp : cps) ids.push_back(id_of(cp));
  return ids;
}

std::string CharVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id >= 0 && id < static_cast<int>(id_to_char_.size()))
      encode_utf8(id_to_char_[static_cast<size_t>(id)], out);
    else
      out += "\xEF\xBF\xBD";  // <unk> renders as the replacement character
  }
  return out;
}

CharDataset load_dataset(const std::string& utf8_text, int min_count, double val_fraction) {
  if (utf8_text.empty()) throw IngestionError("empty corpus");
  const auto cps = decode_utf8(utf8_text);
  const size_t split = cps.size() - static_cast<size_t>(val_fraction * cps.size());
  std::string train_text, val_text;
  train_text.reserve(utf8_text.size());
  for (size_t i = 0; i < cps.size(); ++i)
    encode_utf8(cps[i], i < split ? train_text : val_text);

  CharDataset ds;
  ds.vocab = CharVocab::build(train_text, min_count);
  ds.train_ids = ds.vocab.encode(train_text);
  ds.val_ids = ds.vocab.encode(val_text);
  return ds;
}

}  // namespace attnprior::lm
