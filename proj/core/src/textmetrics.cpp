#include "topicguard/textmetrics.hpp"

#include <unicode/locid.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "topicguard/errors.hpp"
#include "topicguard/util.hpp"

namespace topicguard {

namespace {

struct CodePoint {
  std::size_t begin;
  std::size_t end;
  UChar32 value;  // negative for ill-formed bytes
};

std::string lowercase(std::string_view token) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(token.data(), static_cast<int32_t>(token.size())));
  u.toLower(icu::Locale::getRoot());
  std::string out;
  u.toUTF8String(out);
  return out;
}

void flush_token(std::string_view text, std::vector<CodePoint>& cps, std::vector<std::string>& out) {
  std::size_t b = 0, e = cps.size();
  while (b < e && cps[b].value >= 0 && u_ispunct(cps[b].value)) ++b;
  while (e > b && cps[e - 1].value >= 0 && u_ispunct(cps[e - 1].value)) --e;
  if (b < e) {
    std::string_view raw = text.substr(cps[b].begin, cps[e - 1].end - cps[b].begin);
    // Ill-formed UTF-8 is kept byte-for-byte; ICU would substitute U+FFFD.
    bool well_formed = std::all_of(cps.begin() + static_cast<std::ptrdiff_t>(b),
                                   cps.begin() + static_cast<std::ptrdiff_t>(e),
                                   [](const CodePoint& c) { return c.value >= 0; });
    out.push_back(well_formed ? lowercase(raw) : ascii_lower(raw));
  }
  cps.clear();
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::vector<CodePoint> current;
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  const auto len = static_cast<int32_t>(text.size());
  int32_t i = 0;
  while (i < len) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(s, i, len, c);
    if (c >= 0 && u_isUWhiteSpace(c)) {
      flush_token(text, current, out);
    } else {
      current.push_back({static_cast<std::size_t>(start), static_cast<std::size_t>(i), c});
    }
  }
  flush_token(text, current, out);
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  // Intern tokens so the inner loop compares integers.
  std::unordered_map<std::string_view, int> ids;
  auto intern = [&](std::span<const std::string> seq) {
    std::vector<int> v;
    v.reserve(seq.size());
    for (const auto& t : seq) v.push_back(ids.try_emplace(t, static_cast<int>(ids.size())).first->second);
    return v;
  };
  std::vector<int> x = intern(a), y = intern(b);
  if (y.size() > x.size()) std::swap(x, y);

  std::vector<std::size_t> prev(y.size() + 1, 0), cur(y.size() + 1, 0);
  for (std::size_t r = 1; r <= x.size(); ++r) {
    for (std::size_t c = 1; c <= y.size(); ++c) {
      cur[c] = x[r - 1] == y[c - 1] ? prev[c - 1] + 1 : std::max(prev[c], cur[c - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

RougeL rouge_l(std::span<const std::string> reference, std::span<const std::string> candidate) {
  RougeL r;
  if (reference.empty() || candidate.empty()) return r;
  const auto l = static_cast<double>(lcs_length(reference, candidate));
  r.precision = l / static_cast<double>(candidate.size());
  r.recall = l / static_cast<double>(reference.size());
  if (r.precision + r.recall > 0.0) {
    r.f = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  }
  return r;
}

RougeL rouge_l(std::string_view reference, std::string_view candidate) {
  const auto a = tokenize(reference);
  const auto b = tokenize(candidate);
  return rouge_l(a, b);
}

double rouge_l_f(std::string_view a, std::string_view b) { return rouge_l(a, b).f; }

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw PreconditionError("cosine: dimension mismatch (" + std::to_string(u.size()) + " vs " +
                            std::to_string(v.size()) + ")");
  }
  if (u.empty()) throw PreconditionError("cosine: empty vectors");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw PreconditionError("cosine: zero-norm vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

double cosine(const EmbeddingVector& u, const EmbeddingVector& v) {
  return cosine(std::span<const double>(u.values), std::span<const double>(v.values));
}

std::vector<PairVerdict> pairwise_flags(std::span<const std::string> texts,
                                        std::span<const EmbeddingVector> embeddings,
                                        double rouge_threshold, double cosine_threshold,
                                        std::size_t max_parallel) {
  if (texts.size() != embeddings.size()) {
    throw PreconditionError("pairwise_flags: " + std::to_string(texts.size()) + " texts but " +
                            std::to_string(embeddings.size()) + " embeddings");
  }
  const std::size_t n = texts.size();
  if (n < 2) throw PreconditionError("pairwise_flags needs at least two texts");

  std::vector<std::vector<std::string>> tokens(n);
  for (std::size_t i = 0; i < n; ++i) tokens[i] = tokenize(texts[i]);

  // Row i owns pairs (i, j>i) starting at offset i*n - i(i+1)/2.
  std::vector<PairVerdict> out(n * (n - 1) / 2);
  parallel_for(n - 1, max_parallel, [&](std::size_t i) {
    std::size_t k = i * n - i * (i + 1) / 2;
    for (std::size_t j = i + 1; j < n; ++j, ++k) {
      PairVerdict& pv = out[k];
      pv.i = i;
      pv.j = j;
      pv.verdict.rouge_l_f = rouge_l(tokens[i], tokens[j]).f;
      pv.verdict.cosine = cosine(embeddings[i], embeddings[j]);
      pv.verdict.flagged =
          pv.verdict.rouge_l_f >= rouge_threshold || pv.verdict.cosine >= cosine_threshold;
    }
  });
  return out;
}

std::optional<bool> final_yes_no(std::string_view reply) {
  auto lines = split_lines(reply);
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) return std::nullopt;
  bool yes = false, no = false;
  for (const auto& tok : tokenize(lines.back())) {
    yes = yes || tok == "yes";
    no = no || tok == "no";
  }
  if (yes == no) return std::nullopt;
  return yes;
}

}  // namespace topicguard
