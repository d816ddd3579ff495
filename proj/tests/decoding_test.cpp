#include "dpenmt/decoding.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include "dpenmt/bleu.hpp"
#include "dpenmt/synthetic.hpp"

using namespace dpenmt;

namespace {

ModelConfig decode_config(int vocab) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.ff_dim = 16;
  cfg.vocab_src = std::max(vocab, 5);
  cfg.vocab_tgt = vocab;
  cfg.max_len = 48;
  cfg.label_smoothing = 0.0f;
  return cfg;
}

std::vector<int> random_src(std::mt19937_64& rng, int vocab, int max_len = 6) {
  const int len = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_len));
  std::vector<int> src(static_cast<std::size_t>(len));
  for (auto& t : src)
    t = kNumReservedIds +
        static_cast<int>(rng() % static_cast<std::uint64_t>(std::max(vocab - kNumReservedIds, 1)));
  return src;
}

// Teacher-forced score of a fixed token sequence, accumulated exactly the
// way the search does (per-step float log-softmax summed in double).
double sequence_log_prob(const TransformerModel<float>& model, const std::vector<int>& src,
                         const std::vector<int>& tokens) {
  NoGradGuard no_grad;
  auto enc = model.encoder_forward(src);
  std::vector<int> tgt_in{model.config().bos_id};
  tgt_in.insert(tgt_in.end(), tokens.begin(), tokens.end());
  if (!tokens.empty() && tokens.back() == model.config().eos_id) tgt_in.pop_back();
  Tensor logits = model.decoder_forward(tgt_in, enc);
  const std::size_t v = static_cast<std::size_t>(model.config().vocab_tgt);
  double lp = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    std::vector<float> row =
        dpenmt::detail::row_log_softmax(logits.data().data() + t * v, v);
    lp += static_cast<double>(row[static_cast<std::size_t>(tokens[t])]);
  }
  return lp;
}

struct Scored {
  std::vector<int> tokens;  // includes terminal EOS when finished
  double lp = 0.0;
  double normalized() const { return lp / static_cast<double>(tokens.size()); }
};

// Exhaustive search over every finished sequence of at most max_out
// generated tokens (EOS terminal), preferring higher mean log-prob with
// lexicographic tie-break — the oracle for tiny beam instances.
Scored brute_force_best(const TransformerModel<float>& model, const std::vector<int>& src,
                        int max_out) {
  const ModelConfig& cfg = model.config();
  std::vector<int> alphabet;
  for (int t = 0; t < cfg.vocab_tgt; ++t)
    if (t != cfg.pad_id && t != cfg.bos_id && t != cfg.eos_id) alphabet.push_back(t);

  Scored best;
  bool have = false;
  std::vector<std::vector<int>> prefixes{{}};
  for (int k = 0; k < max_out; ++k) {
    for (const auto& prefix : prefixes) {
      if (static_cast<int>(prefix.size()) != k) continue;
      std::vector<int> candidate = prefix;
      candidate.push_back(cfg.eos_id);
      Scored s{candidate, sequence_log_prob(model, src, candidate)};
      if (!have || s.normalized() > best.normalized() ||
          (s.normalized() == best.normalized() && s.tokens < best.tokens)) {
        best = s;
        have = true;
      }
    }
    if (k + 1 < max_out) {
      std::vector<std::vector<int>> next;
      for (const auto& prefix : prefixes) {
        if (static_cast<int>(prefix.size()) != k) continue;
        for (int a : alphabet) {
          auto p = prefix;
          p.push_back(a);
          next.push_back(std::move(p));
        }
      }
      prefixes = std::move(next);
    }
  }
  return best;
}

// Second, independently written BLEU used to cross-check the library one:
// map-of-token-vector counting, per-sentence clipping, explicit formula.
double reference_bleu(const std::vector<std::string>& hyp_lines,
                      const std::vector<std::string>& ref_lines) {
  double match[5] = {0}, total[5] = {0};
  double hyp_words = 0, ref_words = 0;
  for (std::size_t s = 0; s < hyp_lines.size(); ++s) {
    const auto hyp = split_tokens(hyp_lines[s]);
    const auto ref = split_tokens(ref_lines[s]);
    hyp_words += static_cast<double>(hyp.size());
    ref_words += static_cast<double>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, int> hgrams, rgrams;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i)
        ++hgrams[std::vector<std::string>(hyp.begin() + i, hyp.begin() + i + n)];
      for (std::size_t i = 0; i + n <= ref.size(); ++i)
        ++rgrams[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
      for (const auto& [gram, count] : hgrams) {
        total[n] += count;
        auto it = rgrams.find(gram);
        if (it != rgrams.end()) match[n] += std::min(count, it->second);
      }
    }
  }
  double geo = 1.0;
  for (int n = 1; n <= 4; ++n) {
    if (total[n] == 0 || match[n] == 0) return 0.0;
    geo *= match[n] / total[n];
  }
  const double bp = hyp_words < ref_words ? std::exp(1.0 - ref_words / hyp_words) : 1.0;
  return 100.0 * bp * std::pow(geo, 0.25);
}

}  // namespace

TEST(BeamSearch, BeamOneEqualsGreedyOnRandomModels) {
  std::mt19937_64 rng(2024);
  int checked = 0;
  for (int m = 0; m < 10; ++m) {
    TransformerModel<float> model(decode_config(11), 1000 + m);
    for (int i = 0; i < 5; ++i) {
      std::vector<int> src = random_src(rng, 11);
      const int cap = default_max_out(src.size());
      EXPECT_EQ(beam_search(model, src, 1, cap), greedy_decode(model, src, cap))
          << "model " << m << " input " << i;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 50);
}

TEST(BeamSearch, MatchesBruteForceOnTinyInstances) {
  std::mt19937_64 rng(515);
  for (int m = 0; m < 40; ++m) {
    TransformerModel<float> model(decode_config(5), 7000 + m);
    std::vector<int> src = random_src(rng, 5, 4);
    Hypothesis got = beam_search_hypothesis(model, src, 5, 3);
    Scored want = brute_force_best(model, src, 3);
    ASSERT_TRUE(got.finished) << "instance " << m;
    EXPECT_EQ(got.tokens, want.tokens) << "instance " << m;
    EXPECT_DOUBLE_EQ(got.log_prob, want.lp) << "instance " << m;
  }
}

TEST(BeamSearch, OneHotLogitsEmitFixedSequence) {
  // Zeroed model with a hand-set output bias produces constant logits, so
  // decoding degenerates to that one token (or stops at once when the bias
  // favors EOS).
  TransformerModel<float> model(decode_config(7), 1);
  for (auto& [name, t] : model.params().items)
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  auto& bias = model.params().items.back().second;  // out.bias
  ASSERT_EQ(model.params().items.back().first, "out.bias");
  bias.data()[5] = 10.0f;
  std::vector<int> out = beam_search(model, {4, 5}, 3, 4);
  // Emits the favored token until the cap closes the hypothesis with EOS.
  EXPECT_EQ(out, (std::vector<int>{5, 5, 5}));

  std::fill(bias.data().begin(), bias.data().end(), 0.0f);
  bias.data()[kEosId] = 10.0f;
  Hypothesis hyp = beam_search_hypothesis(model, {4, 5}, 3, 4);
  EXPECT_TRUE(hyp.finished);
  EXPECT_EQ(hyp.tokens, (std::vector<int>{kEosId}));
}

TEST(BeamSearch, WiderBeamNeverScoresWorse) {
  std::mt19937_64 rng(99);
  for (int m = 0; m < 12; ++m) {
    TransformerModel<float> model(decode_config(5), 4000 + m);
    std::vector<int> src = random_src(rng, 5, 4);
    for (auto [b, wider] : {std::pair<int, int>{1, 2}, {2, 4}, {3, 12}}) {
      Hypothesis narrow = beam_search_hypothesis(model, src, b, 6);
      Hypothesis wide = beam_search_hypothesis(model, src, wider, 6);
      EXPECT_GE(wide.normalized_score(), narrow.normalized_score() - 1e-12)
          << "model " << m << " beams " << b << "->" << wider;
    }
  }
}

TEST(BeamSearch, HypothesisInvariants) {
  std::mt19937_64 rng(7);
  for (int m = 0; m < 8; ++m) {
    TransformerModel<float> model(decode_config(9), 300 + m);
    std::vector<int> src = random_src(rng, 9);
    Hypothesis hyp = beam_search_hypothesis(model, src, 4, default_max_out(src.size()));
    EXPECT_EQ(hyp.finished, !hyp.tokens.empty() && hyp.tokens.back() == kEosId);
    // Accumulated log-prob never rises as tokens append.
    double prev = 0.0;
    for (std::size_t k = 1; k <= hyp.tokens.size(); ++k) {
      std::vector<int> prefix(hyp.tokens.begin(), hyp.tokens.begin() + static_cast<long>(k));
      const double lp = sequence_log_prob(model, src, prefix);
      EXPECT_LE(lp, prev + 1e-9);
      prev = lp;
    }
  }
}

TEST(Bleu, PerfectMatchIsHundred) {
  EXPECT_DOUBLE_EQ(bleu_lines({"a b c d", "x y z w"}, {"a b c d", "x y z w"}), 100.0);
}

TEST(Bleu, HandComputedBrevityCase) {
  const double got = bleu_lines({"a b c d"}, {"a b c d e"});
  EXPECT_NEAR(got, 100.0 * std::exp(-0.25), 1e-9);
  EXPECT_NEAR(got, 77.8801, 1e-3);
}

TEST(Bleu, NoFourGramOverlapGivesZero) {
  EXPECT_DOUBLE_EQ(bleu_lines({"a b c x e f g"}, {"a b c d e f g"}), 0.0);
  EXPECT_DOUBLE_EQ(bleu_lines({"a"}, {"a"}), 0.0);  // no 4-grams at all
}

TEST(Bleu, LineCountMismatchRejected) {
  EXPECT_THROW(bleu_lines({"a"}, {"a", "b"}), input_error);
  EXPECT_THROW(bleu_lines({}, {}), input_error);
}

TEST(Bleu, ShuffleInvariant) {
  std::vector<std::string> hyp{"a b c d e", "f g h i", "a c b d", "j k l m n o"};
  std::vector<std::string> ref{"a b c d f", "f g h i", "a b c d", "j k l m o n"};
  const double base = bleu_lines(hyp, ref);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::string> hyp2, ref2;
  for (auto i : perm) {
    hyp2.push_back(hyp[i]);
    ref2.push_back(ref[i]);
  }
  EXPECT_DOUBLE_EQ(bleu_lines(hyp2, ref2), base);
}

TEST(Bleu, AgreesWithIndependentReference) {
  std::mt19937_64 rng(31337);
  const char* alphabet[] = {"a", "b", "c", "d", "e", "f"};
  for (int corpus = 0; corpus < 20; ++corpus) {
    std::vector<std::string> hyps, refs;
    const int lines = 3 + static_cast<int>(rng() % 6);
    for (int l = 0; l < lines; ++l) {
      const int rlen = 4 + static_cast<int>(rng() % 9);
      std::vector<std::string> ref;
      for (int i = 0; i < rlen; ++i) ref.push_back(alphabet[rng() % 6]);
      std::vector<std::string> hyp = ref;
      for (auto& tok : hyp)
        if (rng() % 5 == 0) tok = alphabet[rng() % 6];  // substitutions
      if (rng() % 3 == 0 && hyp.size() > 1) hyp.pop_back();
      std::string hline, rline;
      for (std::size_t i = 0; i < hyp.size(); ++i) hline += (i ? " " : "") + hyp[i];
      for (std::size_t i = 0; i < ref.size(); ++i) rline += (i ? " " : "") + ref[i];
      hyps.push_back(hline);
      refs.push_back(rline);
    }
    const double mine = bleu_lines(hyps, refs);
    const double reference = reference_bleu(hyps, refs);
    EXPECT_NEAR(mine, reference, 0.1) << "corpus " << corpus;
    EXPECT_NEAR(mine, reference, 1e-6) << "corpus " << corpus;
  }
}

TEST(ExactMatch, FractionsAndDegenerateInput) {
  EXPECT_DOUBLE_EQ(exact_match({"a b", "c"}, {"a b", "c"}), 1.0);
  EXPECT_DOUBLE_EQ(exact_match({"a b", "c"}, {"a b", "d"}), 0.5);
  EXPECT_THROW(exact_match({}, {}), input_error);
  EXPECT_THROW(exact_match({"a"}, {"a", "b"}), input_error);
}

TEST(MakeSynthetic, ReverseAlignmentLine) {
  SyntheticTask task;
  task.vocab_size = 12;
  task.min_len = 3;
  task.max_len = 3;
  task.family = PermutationFamily::kReverse;
  SyntheticData data = make_synthetic(task, 2);
  EXPECT_EQ(data.align_lines[0], "0-2 1-1 2-0");
  EXPECT_EQ(data.align_lines[1], "0-2 1-1 2-0");
}

TEST(MakeSynthetic, IdentityMapsInPlace) {
  SyntheticTask task;
  task.vocab_size = 12;
  task.min_len = 4;
  task.max_len = 4;
  task.family = PermutationFamily::kIdentity;
  task.mapping_offset = 3;
  SyntheticData data = make_synthetic(task, 3);
  for (std::size_t p = 0; p < data.bitext.size(); ++p) {
    EXPECT_EQ(data.align_lines[p], "0-0 1-1 2-2 3-3");
    for (std::size_t i = 0; i < 4; ++i) {
      const int content = 12 - kNumReservedIds;
      const int want = kNumReservedIds + (data.bitext.src[p][i] - kNumReservedIds + 3) % content;
      EXPECT_EQ(data.bitext.tgt[p][i], want);
    }
  }
}

TEST(MakeSynthetic, RotateAlignment) {
  SyntheticTask task;
  task.vocab_size = 12;
  task.min_len = 4;
  task.max_len = 4;
  task.family = PermutationFamily::kRotate;
  task.rotate_k = 1;
  SyntheticData data = make_synthetic(task, 1);
  EXPECT_EQ(data.align_lines[0], "0-1 1-2 2-3 3-0");
}

TEST(MakeSynthetic, ImpossibleConfigRejected) {
  SyntheticTask task;
  task.vocab_size = 4;  // no content tokens
  EXPECT_THROW(task.validate(), config_error);
  task = SyntheticTask{};
  task.min_len = 5;
  task.max_len = 4;
  EXPECT_THROW(task.validate(), config_error);
  task = SyntheticTask{};
  task.max_len = 1000;
  EXPECT_THROW(task.validate(), config_error);
}

TEST(MakeSynthetic, ReorderingRulesReconstructTargetOrderForEveryFamily) {
  for (auto family : {PermutationFamily::kIdentity, PermutationFamily::kReverse,
                      PermutationFamily::kRotate, PermutationFamily::kRandom}) {
    SyntheticTask task;
    task.vocab_size = 20;
    task.min_len = 1;
    task.max_len = 10;
    task.family = family;
    task.rotate_k = 2;
    task.seed = 5;
    SyntheticData data = make_synthetic(task, 50);
    const int content = task.content_tokens();
    for (std::size_t p = 0; p < data.bitext.size(); ++p) {
      const auto& reordered = data.reordered_src[p];
      const auto& tgt = data.bitext.tgt[p];
      ASSERT_EQ(reordered.size(), tgt.size());
      for (std::size_t i = 0; i < reordered.size(); ++i) {
        const int mapped =
            kNumReservedIds + (reordered[i] - kNumReservedIds + task.mapping_offset) % content;
        EXPECT_EQ(mapped, tgt[i]) << permutation_family_name(family) << " pair " << p;
      }
    }
  }
}

TEST(RunTwoPass, UntrainedModelsProduceWellFormedOutput) {
  TransformerModel<float> reorder(decode_config(9), 5);
  TransformerModel<float> translate(decode_config(9), 6);
  TwoPassResult res = run_2pt(reorder, translate, {4, 5, 6, 7}, 5);
  for (int t : res.output) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, 9);
    EXPECT_NE(t, kPadId);
    EXPECT_NE(t, kBosId);
    EXPECT_NE(t, kEosId);
  }
  EXPECT_FALSE(res.reordered.empty());  // falls back to src when degenerate
}

TEST(RunTwoPass, EmptyReorderFallsBackToSource) {
  TransformerModel<float> reorder(decode_config(7), 1);
  for (auto& [name, t] : reorder.params().items)
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  auto& bias = reorder.params().items.back().second;
  bias.data()[kEosId] = 10.0f;  // reorder model emits nothing
  TransformerModel<float> translate(decode_config(7), 2);
  std::vector<int> src{4, 5, 6};
  TwoPassResult res = run_2pt(reorder, translate, src, 3);
  EXPECT_EQ(res.reordered, src);
}
