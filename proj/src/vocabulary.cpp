// SPDX-License-Identifier: Apache-2.0
#include "vitro/vocabulary.hpp"

#include <cstdio>
#include <fstream>

#include "vitro/error.hpp"
#include "vitro/rng.hpp"

namespace vitro {

namespace {

std::size_t count_occurrences(std::string_view text, std::string_view what) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(what); pos != std::string_view::npos; pos = text.find(what, pos + what.size())) {
    ++n;
  }
  return n;
}

}  // namespace

std::vector<std::string> default_templates() {
  return {"The time series is {P} , The dataset is {S}", "Forecast the next steps of {P}"};
}

void validate_template(std::string_view text) {
  if (count_occurrences(text, TemplateTokenizer::kPseudoSlot) != 1) {
    throw ConfigError("template must contain {P} exactly once: '" + std::string(text) + "'");
  }
  if (count_occurrences(text, TemplateTokenizer::kSharedSlot) > 1) {
    throw ConfigError("template may contain {S} at most once: '" + std::string(text) + "'");
  }
}

Vocabulary Vocabulary::create(std::span<const WindowId> ids, std::size_t width, std::uint64_t seed,
                              std::vector<std::string> templates) {
  if (ids.empty()) throw InputError("vocabulary needs at least one window");
  Rng rng(derive_seed(seed, "vocabulary"));
  Tensor words = normal_tensor(rng, {ids.size(), width}, kInitStd, true);
  Tensor shared = normal_tensor(rng, {1, width}, kInitStd, true);
  return Vocabulary(std::move(words), std::move(shared), {ids.begin(), ids.end()}, std::move(templates));
}

Vocabulary::Vocabulary(Tensor words, Tensor shared, std::vector<WindowId> ids, std::vector<std::string> templates)
    : words_(std::move(words)), shared_(std::move(shared)), ids_(std::move(ids)), templates_(std::move(templates)) {
  if (words_.rank() != 2 || words_.shape()[0] != ids_.size()) {
    throw DimensionError("vocabulary: V " + shape_str(words_.shape()) + " does not have one row per window (" +
                         std::to_string(ids_.size()) + ")");
  }
  if (shared_.numel() != words_.shape()[1]) {
    throw DimensionError("vocabulary: s " + shape_str(shared_.shape()) + " does not match width of V");
  }
  if (templates_.empty()) throw ConfigError("vocabulary: empty template set");
  for (const std::string& t : templates_) validate_template(t);
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    if (!rows_.emplace(ids_[r], r).second) {
      throw InputError("vocabulary: window id " + std::to_string(ids_[r]) + " listed twice");
    }
  }
}

std::size_t Vocabulary::row_of(WindowId id) const {
  auto it = rows_.find(id);
  if (it == rows_.end()) throw LookupError("window id " + std::to_string(id) + " is not in the vocabulary");
  return it->second;
}

void Vocabulary::set_trainable(bool trainable) {
  words_.set_trainable(trainable);
  shared_.set_trainable(trainable);
}

void Vocabulary::write(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "words", words_);
  ckpt.add(prefix + "shared", shared_);
  std::vector<double> ids;
  for (WindowId id : ids_) ids.push_back(static_cast<double>(id));
  ckpt.add(prefix + "ids", Shape{ids.size()}, ids);
  std::string joined;
  for (const std::string& t : templates_) joined += t + '\n';
  ckpt.add_text(prefix + "templates", joined);
}

Vocabulary Vocabulary::read(const Checkpoint& ckpt, const std::string& prefix) {
  std::vector<WindowId> ids;
  for (double v : ckpt.get(prefix + "ids").values) ids.push_back(static_cast<WindowId>(v));
  std::vector<std::string> templates;
  std::string joined = ckpt.text(prefix + "templates");
  for (std::size_t start = 0, nl; (nl = joined.find('\n', start)) != std::string::npos; start = nl + 1) {
    templates.push_back(joined.substr(start, nl - start));
  }
  return Vocabulary(ckpt.tensor(prefix + "words"), ckpt.tensor(prefix + "shared"), std::move(ids),
                    std::move(templates));
}

void PromptLayout::append(SegmentKind kind, std::size_t count) {
  if (count == 0) return;
  if (kind == SegmentKind::Patch)
    for (std::size_t i = 0; i < count; ++i) patch_positions.push_back(length + i);
  if (!segments.empty() && segments.back().kind == kind && kind == SegmentKind::Text) {
    segments.back().length += count;
  } else {
    segments.push_back({kind, length, count});
  }
  length += count;
}

AttentionMask PromptLayout::attention_mask() const {
  AttentionMask mask;
  mask.causal = true;
  mask.always_visible.assign(length, true);
  for (std::size_t p : patch_positions) mask.always_visible[p] = false;
  return mask;
}

Tensor splice_template(WindowId id, std::size_t template_id, const Vocabulary& vocab,
                       const FrozenBackbone& backbone, PromptLayout* layout) {
  if (template_id >= vocab.templates().size()) {
    throw LookupError("template id " + std::to_string(template_id) + " out of range");
  }
  const std::size_t row = vocab.row_of(id);
  const TemplateTokenizer& tok = backbone.tokenizer();
  const TokenId pseudo = tok.id(TemplateTokenizer::kPseudo);
  const TokenId shared = tok.id(TemplateTokenizer::kShared);
  const std::vector<TokenId> tokens = tok.tokenize(vocab.templates()[template_id]);

  std::vector<Tensor> parts;
  std::vector<TokenId> run;
  auto flush = [&] {
    if (run.empty()) return;
    parts.push_back(backbone.embed_text(run));
    if (layout) layout->append(SegmentKind::Text, run.size());
    run.clear();
  };
  for (TokenId t : tokens) {
    if (t == pseudo) {
      flush();
      parts.push_back(slice_rows(vocab.words(), row, row + 1));
      if (layout) layout->append(SegmentKind::Pseudo, 1);
    } else if (t == shared) {
      flush();
      parts.push_back(reshape(vocab.shared(), {1, vocab.width()}));
      if (layout) layout->append(SegmentKind::Shared, 1);
    } else {
      run.push_back(t);
    }
  }
  flush();
  return concat(parts, 0);
}

AssembledPrompt assemble_prompt(const Tensor& patch_embeddings, WindowId id, std::size_t template_id,
                                const Vocabulary& vocab, const Tensor& stats_token, const FrozenBackbone& backbone) {
  const std::size_t d = backbone.width();
  if (patch_embeddings.rank() != 2 || patch_embeddings.shape()[1] != d) {
    throw DimensionError("assemble_prompt: patch embeddings " + shape_str(patch_embeddings.shape()) +
                         " do not match backbone width " + std::to_string(d));
  }
  if (stats_token.numel() != d) {
    throw DimensionError("assemble_prompt: stats token " + shape_str(stats_token.shape()) + " has wrong width");
  }
  if (vocab.width() != d) throw DimensionError("assemble_prompt: vocabulary width differs from backbone width");
  AssembledPrompt out;
  out.layout.append(SegmentKind::Patch, patch_embeddings.shape()[0]);
  Tensor text = splice_template(id, template_id, vocab, backbone, &out.layout);
  out.layout.append(SegmentKind::Stats, 1);
  Tensor seq = concat({patch_embeddings, text, reshape(stats_token, {1, d})}, 0);
  out.sequence = add(seq, backbone.positions(out.layout.length));
  return out;
}

void write_embedding_csv(const Tensor& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::size_t d = rows.shape().back();
  for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << "dim_" << j;
  out << '\n';
  char buf[32];
  auto write_row = [&](std::span<const double> row) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", row[j]);
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  };
  for (std::size_t r = 0; r < rows.numel() / d; ++r) write_row(rows.data().subspan(r * d, d));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void export_embeddings(const Vocabulary& vocab, const std::filesystem::path& stem) {
  Checkpoint ckpt;
  vocab.write(ckpt);
  auto bin = stem;
  bin += ".vitro";
  auto csv = stem;
  csv += ".csv";
  auto shared_csv = stem;
  shared_csv += ".shared.csv";
  ckpt.save(bin);
  write_embedding_csv(vocab.words(), csv);
  write_embedding_csv(vocab.shared(), shared_csv);
}

}  // namespace vitro
