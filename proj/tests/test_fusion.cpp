#include <catch2/catch_amalgamated.hpp>

#include "mpoxvlm/mpoxvlm.hpp"

using namespace mpoxvlm;

namespace {

ClinicalAttributes sample_attrs(bool mpox) {
  ClinicalAttributes a;
  a.patient_id = 4;
  a.fitzpatrick = 3;
  a.body_part = 9;
  a.age_group = AgeGroup::adult;
  a.gender = GenderPresentation::male;
  a.disease_id = mpox ? kMpoxDiseaseId : 41;
  a.stage = mpox ? 2 : -1;
  return a;
}

DecoderLm tiny_lm(Rng& rng, int vocab, Eigen::Index d_h, int depth, int heads,
                  Eigen::Index max_len) {
  DecoderLm lm;
  lm.init(rng, vocab, d_h, depth, heads, max_len);
  return lm;
}

// A scripted LM: zero token embeddings, one-hot positional embeddings, and an
// output projection that routes position i to a fixed next token. Greedy
// decoding then emits exactly the scripted token sequence.
DecoderLm scripted_lm(const Tokenizer& tok, const std::vector<int>& script,
                      Eigen::Index prefix_len, Eigen::Index max_len) {
  int v = tok.vocab_size();
  Eigen::Index d_h = v + max_len;
  DecoderLm lm;
  Rng rng(0);
  lm.init(rng, v, d_h, 0, 1, max_len);
  lm.token_embed.setZero();
  lm.pos_embed.setZero();
  for (Eigen::Index i = 0; i < max_len; ++i) lm.pos_embed(i, v + i) = 1.0;
  lm.out_proj.w.setZero();
  lm.out_proj.b.setZero();
  for (size_t s = 0; s < script.size(); ++s) {
    Eigen::Index pos = prefix_len - 1 + static_cast<Eigen::Index>(s);
    lm.out_proj.w(v + pos, script[s]) = 10.0;
  }
  return lm;
}

AssembledSequence blank_prefix(Eigen::Index len, Eigen::Index d_h) {
  AssembledSequence seq;
  seq.embed = Mat::Zero(len, d_h);
  for (Eigen::Index i = 0; i < len; ++i) {
    seq.segments.push_back(Segment::x_q);
    seq.token_ids.push_back(-1);
    seq.loss_mask.push_back(false);
  }
  return seq;
}

}  // namespace

TEST_CASE("project_clip and project_cls shape contracts") {
  Rng rng(1);
  AdapterMlp ad;
  ad.init(rng, 5, 6, 7);

  Mat feats = Mat::NullaryExpr(9, 5, [&]() { return rng.normal(); });
  Mat z = project_clip(ad, feats);
  CHECK(z.rows() == 7);
  CHECK(z.cols() == 9);

  Vec cls = Vec::NullaryExpr(5, [&]() { return rng.normal(); });
  Mat zv = project_cls(ad, cls);
  CHECK(zv.rows() == 7);
  CHECK(zv.cols() == 1);

  Mat bad = Mat::Zero(9, 4);
  CHECK_THROWS_AS(project_clip(ad, bad), ValidationError);
}

TEST_CASE("paper-scale token grid: 576 projected columns") {
  Rng rng(2);
  AdapterMlp ad;
  ad.init(rng, 4, 4, 6);
  Mat feats = Mat::NullaryExpr((336 / 14) * (336 / 14), 4, [&]() { return rng.normal(); });
  Mat z = project_clip(ad, feats);
  CHECK(z.rows() == 6);
  CHECK(z.cols() == 576);
}

TEST_CASE("zero adapter weights give zero output") {
  Rng rng(3);
  AdapterMlp ad;
  ad.init(rng, 4, 5, 6);
  ad.fc1.w.setZero();
  ad.fc1.b.setZero();
  ad.fc2.w.setZero();
  ad.fc2.b.setZero();
  Mat feats = Mat::NullaryExpr(3, 4, [&]() { return rng.normal(); });
  CHECK(project_clip(ad, feats).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adapter passes identity in the linear region of the activation") {
  AdapterMlp ad;
  Rng rng(4);
  ad.init(rng, 3, 3, 3);
  ad.fc1.w = Mat::Identity(3, 3);
  ad.fc1.b.setZero();
  ad.fc2.w = Mat::Identity(3, 3);
  ad.fc2.b.setZero();
  Vec cls(3);
  cls << 20.0, 25.0, 30.0;  // far into the identity-passing region of SiLU
  Mat z = project_cls(ad, cls);
  CHECK_THAT((z.col(0) - cls).cwiseAbs().maxCoeff(), Catch::Matchers::WithinAbs(0.0, 1e-6));
}

TEST_CASE("assembled sequence length arithmetic") {
  // 16 visual + 1 CLS + 20 context + 18 question + 8 option + 3 answer words
  // + 3 SEP + BOS + EOS = 71 positions.
  std::vector<std::string> words;
  for (int i = 0; i < 64; ++i) words.push_back("w" + std::to_string(i));
  Tokenizer tok = Tokenizer::from_vocab(words);

  auto join = [](int from, int count) {
    std::string s;
    for (int i = 0; i < count; ++i) s += (i ? " w" : "w") + std::to_string(from + i);
    return s;
  };

  VqaInstance inst;
  inst.context_text = join(0, 20);
  inst.question_text = join(20, 18);
  inst.options = {join(40, 3), join(44, 3)};  // "Options:" + 3 + 3 = 8 option tokens
  inst.answer = inst.options[0];
  inst.label = true;

  Rng rng(5);
  Eigen::Index d_h = 6;
  Mat embed_table = Mat::NullaryExpr(tok.vocab_size(), d_h, [&]() { return rng.normal(); });
  Mat z_clip = Mat::NullaryExpr(d_h, 16, [&]() { return rng.normal(); });
  Mat z_v = Mat::NullaryExpr(d_h, 1, [&]() { return rng.normal(); });

  AssembledSequence seq = assemble_sequence(z_clip, z_v, inst, tok, embed_table);
  CHECK(seq.length() == 71);
  CHECK(seq.mask_count() == 3 + 1);  // answer tokens + EOS
  for (Eigen::Index t = 0; t < seq.length(); ++t) {
    if (seq.loss_mask[static_cast<size_t>(t)])
      CHECK(seq.segments[static_cast<size_t>(t)] == Segment::y);
  }
}

TEST_CASE("segment order is a flag-filtered subsequence of the canonical order") {
  Tokenizer tok = Tokenizer::build_default();
  Rng rng(6);
  Eigen::Index d_h = 8;
  Mat embed_table = Mat::NullaryExpr(tok.vocab_size(), d_h, [&]() { return rng.normal(); });
  VqaInstance inst = build_vqa(sample_attrs(true));

  for (bool clip : {false, true}) {
    for (bool cls : {false, true}) {
      for (bool ctx : {false, true}) {
        Mat z_clip = clip ? Mat::NullaryExpr(d_h, 5, [&]() { return rng.normal(); }) : Mat();
        Mat z_v = cls ? Mat::NullaryExpr(d_h, 1, [&]() { return rng.normal(); }) : Mat();
        AssembledSequence seq = assemble_sequence(z_clip, z_v, inst, tok, embed_table,
                                                  flags_from(clip, cls, ctx));
        const std::vector<Segment> canonical = {Segment::z_clip, Segment::z_v, Segment::x_c,
                                                Segment::x_q, Segment::x_o, Segment::y};
        size_t ci = 0;
        for (Segment s : seq.segments) {
          while (ci < canonical.size() && canonical[ci] != s) ++ci;
          REQUIRE(ci < canonical.size());
        }
        bool has_ctx = false, has_zv = false, has_zclip = false;
        for (Segment s : seq.segments) {
          has_ctx |= s == Segment::x_c;
          has_zv |= s == Segment::z_v;
          has_zclip |= s == Segment::z_clip;
        }
        CHECK(has_ctx == ctx);
        CHECK(has_zv == cls);
        CHECK(has_zclip == clip);
      }
    }
  }
}

TEST_CASE("empty options are rejected") {
  Tokenizer tok = Tokenizer::build_default();
  VqaInstance inst = build_vqa(sample_attrs(true));
  inst.options[1].clear();
  Mat embed_table = Mat::Zero(tok.vocab_size(), 4);
  CHECK_THROWS_AS(
      assemble_sequence(Mat(), Mat(), inst, tok, embed_table, flags_from(false, false, true)),
      ValidationError);
}

TEST_CASE("causal attention: perturbing position j leaves earlier logits unchanged") {
  Rng rng(7);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 2, 2, 64);
  Mat embed_table = lm.token_embed;
  VqaInstance inst = build_vqa(sample_attrs(false));
  AssembledSequence seq =
      assemble_sequence(Mat(), Mat(), inst, tok, embed_table, flags_from(false, false, true));

  Mat base = lm_forward(lm, nullptr, seq);
  Eigen::Index j = seq.length() / 2;
  AssembledSequence perturbed = seq;
  perturbed.embed.row(j).array() += 0.5;
  Mat changed = lm_forward(lm, nullptr, perturbed);

  for (Eigen::Index t = 0; t < j; ++t) CHECK(base.row(t) == changed.row(t));
  CHECK(base.row(j) != changed.row(j));
}

TEST_CASE("LoRA at B=0 is exactly the base model") {
  Rng rng(8);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 2, 2, 96);
  LmLora lora;
  lora.init(rng, lm, 4, 8.0);
  VqaInstance inst = build_vqa(sample_attrs(true));
  AssembledSequence seq = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                            flags_from(false, false, true));

  Mat base = lm_forward(lm, nullptr, seq);
  Mat adapted = lm_forward(lm, &lora, seq);
  CHECK(base == adapted);  // bit-identical

  CHECK(answer_nll(lm, nullptr, seq).loss == answer_nll(lm, &lora, seq).loss);
  CHECK(mpox_score(lm, nullptr, seq, tok, inst) == mpox_score(lm, &lora, seq, tok, inst));
}

TEST_CASE("zero-depth LM with zero output projection is uniform") {
  Rng rng(9);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 8, 0, 1, 96);
  lm.out_proj.w.setZero();
  lm.out_proj.b.setZero();
  VqaInstance inst = build_vqa(sample_attrs(true));
  AssembledSequence seq = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                            flags_from(false, false, true));
  Mat logits = lm_forward(lm, nullptr, seq);
  CHECK(logits.cwiseAbs().maxCoeff() == 0.0);

  // Uniform logits: answer NLL is ln(V) and the mpox score is exactly 1/2.
  double v = static_cast<double>(tok.vocab_size());
  CHECK_THAT(answer_nll(lm, nullptr, seq).loss, Catch::Matchers::WithinAbs(std::log(v), 1e-12));
  AssembledSequence prefix = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                               flags_from(false, false, true), false);
  CHECK(mpox_score(lm, nullptr, prefix, tok, inst) == 0.5);
}

TEST_CASE("scripted model drives the loss to zero and forces decoding") {
  Tokenizer tok = Tokenizer::build_default();
  VqaInstance inst = build_vqa(sample_attrs(true));
  std::vector<int> script = tok.encode(inst.options[0]);
  script.push_back(Tokenizer::kEos);

  Eigen::Index prefix_len = 5;
  DecoderLm lm = scripted_lm(tok, script, prefix_len, 64);
  AssembledSequence prefix = blank_prefix(prefix_len, lm.width());

  // Forced decoding emits the mpox option string exactly.
  std::string out = generate_answer(lm, nullptr, prefix, tok, 32);
  CHECK(out == inst.options[0]);

  // Teacher forcing that script: near-zero NLL (high-margin logits).
  AssembledSequence seq = prefix;
  for (int id : script) {
    Mat embed(seq.embed.rows() + 1, seq.embed.cols());
    embed.topRows(seq.embed.rows()) = seq.embed;
    embed.row(embed.rows() - 1) = lm.token_embed.row(id);
    seq.embed = std::move(embed);
    seq.segments.push_back(Segment::y);
    seq.token_ids.push_back(id);
    seq.loss_mask.push_back(true);
  }
  CHECK(answer_nll(lm, nullptr, seq).loss < 1e-3);
}

TEST_CASE("greedy generation is deterministic and respects max_new") {
  Rng rng(10);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 1, 2, 96);
  VqaInstance inst = build_vqa(sample_attrs(true));
  AssembledSequence prefix = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                               flags_from(false, false, true), false);

  std::string a = generate_answer(lm, nullptr, prefix, tok, 8);
  std::string b = generate_answer(lm, nullptr, prefix, tok, 8);
  CHECK(a == b);

  std::string one = generate_answer(lm, nullptr, prefix, tok, 1);
  CHECK(Tokenizer::split_words(one).size() <= 1);

  CHECK_THROWS_AS(generate_answer(lm, nullptr, prefix, tok, 0), ValidationError);
}

TEST_CASE("single-pass masked NLL equals the stepwise teacher-forced chain") {
  Rng rng(11);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 2, 2, 128);

  for (int rep = 0; rep < 3; ++rep) {
    ClinicalAttributes a = sample_attrs(rep % 2 == 0);
    a.body_part = 1 + rep;
    VqaInstance inst = build_vqa(a);
    AssembledSequence seq = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                              flags_from(false, false, true));

    double single = answer_nll(lm, nullptr, seq).loss * static_cast<double>(seq.mask_count());

    // Oracle: re-forward the truncated sequence one answer token at a time
    // and accumulate -log p of each next token from the final position.
    double stepwise = 0.0;
    for (Eigen::Index t = 0; t < seq.length(); ++t) {
      if (!seq.loss_mask[static_cast<size_t>(t)]) continue;
      AssembledSequence trunc;
      trunc.embed = seq.embed.topRows(t);
      trunc.segments.assign(seq.segments.begin(), seq.segments.begin() + t);
      trunc.token_ids.assign(seq.token_ids.begin(), seq.token_ids.begin() + t);
      trunc.loss_mask.assign(static_cast<size_t>(t), false);
      Mat logits = lm_forward(lm, nullptr, trunc);
      stepwise -= log_softmax_at(logits.row(t - 1), seq.token_ids[static_cast<size_t>(t)]);
    }
    CHECK_THAT(single, Catch::Matchers::WithinAbs(stepwise, 1e-10));
  }
}

TEST_CASE("mpox_score matches a brute-force per-token probability chain") {
  Rng rng(12);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 1, 2, 128);
  VqaInstance inst = build_vqa(sample_attrs(true));
  AssembledSequence prefix = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                               flags_from(false, false, true), false);

  auto brute_loglik = [&](const std::string& option) {
    std::vector<int> ids = tok.encode(option);
    ids.push_back(Tokenizer::kEos);
    AssembledSequence seq = prefix;
    double total = 0.0;
    for (int id : ids) {
      Mat logits = lm_forward(lm, nullptr, seq);
      total += log_softmax_at(logits.row(logits.rows() - 1), id);
      Mat embed(seq.embed.rows() + 1, seq.embed.cols());
      embed.topRows(seq.embed.rows()) = seq.embed;
      embed.row(embed.rows() - 1) = lm.token_embed.row(id);
      seq.embed = std::move(embed);
      seq.segments.push_back(Segment::y);
      seq.token_ids.push_back(id);
      seq.loss_mask.push_back(false);
    }
    return total / static_cast<double>(ids.size());
  };

  double lm_score = mpox_score(lm, nullptr, prefix, tok, inst);
  double l1 = brute_loglik(inst.options[0]);
  double l0 = brute_loglik(inst.options[1]);
  double expected = std::exp(l1) / (std::exp(l1) + std::exp(l0));
  CHECK_THAT(lm_score, Catch::Matchers::WithinAbs(expected, 1e-10));
}

TEST_CASE("mpox_score complement symmetry under option role swap") {
  Rng rng(13);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 1, 2, 128);
  VqaInstance inst = build_vqa(sample_attrs(false));
  AssembledSequence prefix = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                               flags_from(false, false, true), false);

  VqaInstance swapped = inst;
  std::swap(swapped.options[0], swapped.options[1]);
  double s = mpox_score(lm, nullptr, prefix, tok, inst);
  double s_swapped = mpox_score(lm, nullptr, prefix, tok, swapped);
  CHECK_THAT(s + s_swapped, Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("lora merge reproduces adapted logits and guards double-merge") {
  Rng rng(14);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 16, 2, 2, 128);
  LmLora lora;
  lora.init(rng, lm, 4, 8.0);
  // Simulate training: give B non-zero values.
  for (auto& lp : lora.q)
    lp.b = Mat::NullaryExpr(lp.b.rows(), lp.b.cols(), [&]() { return rng.normal(0, 0.05); });
  for (auto& lp : lora.v)
    lp.b = Mat::NullaryExpr(lp.b.rows(), lp.b.cols(), [&]() { return rng.normal(0, 0.05); });

  VqaInstance inst = build_vqa(sample_attrs(true));
  AssembledSequence seq = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                            flags_from(false, false, true));

  Mat adapted = lm_forward(lm, &lora, seq);
  DecoderLm merged = lora_merge(lm, lora);
  Mat merged_logits = lm_forward(merged, nullptr, seq);
  CHECK((adapted - merged_logits).cwiseAbs().maxCoeff() < 1e-6);

  CHECK_THROWS_AS(lora_merge(lm, lora), ValidationError);  // double merge

  LmLora zero;
  zero.init(rng, lm, 4, 8.0);
  DecoderLm merged_zero = lora_merge(lm, zero);
  for (size_t i = 0; i < lm.stack.blocks.size(); ++i) {
    CHECK(merged_zero.stack.blocks[i].attn.wq.w == lm.stack.blocks[i].attn.wq.w);
    CHECK(merged_zero.stack.blocks[i].attn.wv.w == lm.stack.blocks[i].attn.wv.w);
  }
}

TEST_CASE("overlength sequences are rejected") {
  Rng rng(15);
  Tokenizer tok = Tokenizer::build_default();
  DecoderLm lm = tiny_lm(rng, tok.vocab_size(), 8, 1, 2, 16);
  VqaInstance inst = build_vqa(sample_attrs(true));
  AssembledSequence seq = assemble_sequence(Mat(), Mat(), inst, tok, lm.token_embed,
                                            flags_from(false, false, true));
  REQUIRE(seq.length() > 16);
  CHECK_THROWS_AS(lm_forward(lm, nullptr, seq), ValidationError);
}
