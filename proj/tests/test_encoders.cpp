#include <catch2/catch_amalgamated.hpp>

#include "mpoxvlm/mpoxvlm.hpp"

using namespace mpoxvlm;

namespace {

Image random_image(Rng& rng, int h, int w) {
  Image img(h, w);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("preprocess keeps an already-square image at target size unchanged") {
  Rng rng(1);
  Image img = random_image(rng, 32, 32);
  Image out = preprocess(img, 32);
  CHECK(out.data == img.data);
}

TEST_CASE("preprocess crops to square then resizes") {
  Rng rng(2);
  Image img = random_image(rng, 60, 100);
  Image out = preprocess(img, 30);
  CHECK(out.height == 30);
  CHECK(out.width == 30);

  // Manual reference: crop the centered 60x60 window, then resize.
  Image cropped(60, 60);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 60; ++x)
      for (int c = 0; c < 3; ++c) cropped.at(y, x, c) = img.at(y, 20 + x, c);
  // center_crop_square crops columns [20, 80) for a 60x100 image
  Image manual(60, 60);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 60; ++x)
      for (int c = 0; c < 3; ++c) manual.at(y, x, c) = img.at(y, 20 + x, c);
  Image resized = resize_bilinear(manual, 30, 30);
  CHECK(out.data == resized.data);
}

TEST_CASE("paper-scale geometry: 336/14 gives 576 tokens") {
  Rng rng(3);
  PatchTokenizer tok;
  tok.init(rng, 14, 336, 8);
  CHECK(tok.tokens() == 576);
}

TEST_CASE("patch tokenization counts and linearity") {
  Rng rng(4);
  PatchTokenizer tok;
  tok.init(rng, 8, 64, 16);
  CHECK(tok.tokens() == 64);

  // Zero image, zero positions, zero bias -> zero tokens.
  tok.pos.setZero();
  tok.proj.b.setZero();
  Image zero(64, 64);
  Mat t = tok.tokenize(zero);
  CHECK(t.rows() == 64);
  CHECK(t.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("swapping two input patches swaps the pre-positional embeddings") {
  Rng rng(5);
  PatchTokenizer tok;
  tok.init(rng, 8, 32, 12);
  Image img = random_image(rng, 32, 32);

  Image swapped = img;
  // Swap patch (0,0) with patch (1,2): patches are 8x8 blocks.
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c)
        std::swap(swapped.at(y, x, c), swapped.at(8 + y, 16 + x, c));

  Mat a = tok.tokenize(img, /*add_pos=*/false);
  Mat b = tok.tokenize(swapped, /*add_pos=*/false);
  int p1 = 0, p2 = 1 * 4 + 2;
  CHECK(a.row(p1) == b.row(p2));
  CHECK(a.row(p2) == b.row(p1));
  for (int i = 0; i < tok.tokens(); ++i) {
    if (i == p1 || i == p2) continue;
    CHECK(a.row(i) == b.row(i));
  }
}

TEST_CASE("indivisible sizes are rejected") {
  Rng rng(6);
  PatchTokenizer tok;
  CHECK_THROWS_AS(tok.init(rng, 7, 32, 8), ValidationError);
  tok.init(rng, 8, 32, 8);
  Image wrong = random_image(rng, 24, 24);
  CHECK_THROWS_AS(tok.tokenize(wrong), ValidationError);
}

TEST_CASE("vl encoder output shape is k x d_v across random configs") {
  Rng rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    int heads = 1 + static_cast<int>(rng.randint(0, 2));
    Eigen::Index d_v = heads * (4 + 4 * rng.randint(0, 2));
    int depth = static_cast<int>(rng.randint(1, 3));
    int k = 4 + static_cast<int>(rng.randint(0, 12));
    VlEncoder enc;
    enc.init(rng, d_v, depth, heads);
    Mat tokens = Mat::NullaryExpr(k, d_v, [&]() { return rng.normal(); });
    Mat out = encode_vl(enc, tokens);
    CHECK(out.rows() == k);
    CHECK(out.cols() == d_v);
  }
}

TEST_CASE("zero-depth encoders are the identity") {
  Rng rng(8);
  VlEncoder enc;
  enc.init(rng, 8, 0, 2);
  Mat tokens = Mat::NullaryExpr(5, 8, [&]() { return rng.normal(); });
  CHECK(encode_vl(enc, tokens) == tokens);

  VitClassifier vit;
  vit.init(rng, 8, 0, 2);
  ClassifierStates st = encode_classifier(vit, tokens);
  CHECK(st.cls_feature == Vec(vit.cls_token + vit.cls_pos));
  CHECK(st.patch_features == tokens);
}

TEST_CASE("classifier features separate distinct images") {
  Rng rng(9);
  PatchTokenizer tok;
  tok.init(rng, 8, 32, 16);
  VitClassifier vit;
  vit.init(rng, 16, 2, 4);

  int distinct = 0;
  for (int rep = 0; rep < 20; ++rep) {
    Image a = random_image(rng, 32, 32);
    Image b = random_image(rng, 32, 32);
    Vec fa = encode_classifier(vit, tok.tokenize(a)).cls_feature;
    Vec fb = encode_classifier(vit, tok.tokenize(b)).cls_feature;
    if ((fa - fb).cwiseAbs().maxCoeff() > 1e-12) ++distinct;
  }
  CHECK(distinct >= 19);
}

TEST_CASE("classify head conventions") {
  Rng rng(10);
  VitClassifier vit;
  vit.init(rng, 8, 0, 2);
  vit.head.w.setZero();
  vit.head.b.setZero();
  Vec cls = Vec::NullaryExpr(8, [&]() { return rng.normal(); });

  Eigen::Vector2d logits = classify_head(vit, cls);
  CHECK(logits(0) == 0.0);
  CHECK(logits(1) == 0.0);
  CHECK(classifier_score(logits) == 0.5);
  // Ties break toward non-mpox.
  CHECK_FALSE(classifier_predict(Eigen::Vector2d(3.0, 3.0)));

  // Raising the mpox logit strictly raises the score.
  double prev = classifier_score(Eigen::Vector2d(1.0, -2.0));
  for (double l = -1.5; l < 3.0; l += 0.5) {
    double s = classifier_score(Eigen::Vector2d(1.0, l));
    CHECK(s > prev);
    prev = s;
  }
}

TEST_CASE("mask sampling matches round(mask_ratio * k) without replacement") {
  Rng rng(11);
  for (double ratio : {0.0, 0.25, 0.5, 0.75, 0.9}) {
    auto mask = sample_mask(16, ratio, rng);
    CHECK(static_cast<int>(mask.size()) == static_cast<int>(std::lround(ratio * 16)));
    std::set<int> unique(mask.begin(), mask.end());
    CHECK(unique.size() == mask.size());
    for (int j : mask) CHECK((j >= 0 && j < 16));
  }
  CHECK_THROWS_AS(sample_mask(16, 1.0, rng), ValidationError);
  CHECK_THROWS_AS(sample_mask(16, -0.1, rng), ValidationError);
}

TEST_CASE("mae loss conventions: empty mask and exact reconstruction") {
  Rng rng(12);
  PatchTokenizer tok;
  tok.init(rng, 4, 16, 8);
  VitClassifier vit;
  vit.init(rng, 8, 1, 2);
  MaeConfig mc;
  mc.mask_ratio = 0.5;
  mc.decoder_depth = 1;
  mc.decoder_dim = 8;
  MaeDecoder dec;
  dec.init(rng, mc, 8, tok.tokens(), 4, 2);

  Image img = random_image(rng, 16, 16);
  // mask_ratio = 0: empty mask, loss defined as 0.
  CHECK(mae_step(tok, vit, dec, img, {}, nullptr, nullptr) == 0.0);

  // Zero image with a zero-output decoder head reconstructs exactly.
  dec.pixel_head.w.setZero();
  dec.pixel_head.b.setZero();
  Image zero(16, 16);
  Rng mask_rng(13);
  auto mask = sample_mask(tok.tokens(), 0.5, mask_rng);
  CHECK(mae_step(tok, vit, dec, zero, mask, nullptr, nullptr) == 0.0);
}

TEST_CASE("mae loss ignores reconstructions at visible positions") {
  Rng rng(14);
  Mat pred = Mat::NullaryExpr(8, 12, [&]() { return rng.normal(); });
  Mat pixels = Mat::NullaryExpr(8, 12, [&]() { return rng.uniform(); });
  std::vector<int> masked = {1, 4, 6};

  double base = masked_mse(pred, pixels, masked);
  Mat perturbed = pred;
  for (int j : {0, 2, 3, 5, 7}) perturbed.row(j).array() += rng.normal() * 10.0;
  CHECK(masked_mse(perturbed, pixels, masked) == base);

  Mat touched = pred;
  touched.row(4).array() += 1.0;
  CHECK(masked_mse(touched, pixels, masked) != base);
}

TEST_CASE("mae training reduces reconstruction loss on a tiny fixture") {
  Rng rng(15);
  PatchTokenizer tok;
  tok.init(rng, 4, 16, 8);
  VitClassifier vit;
  vit.init(rng, 8, 1, 2);
  MaeConfig mc;
  mc.mask_ratio = 0.5;
  mc.decoder_depth = 1;
  mc.decoder_dim = 8;
  MaeDecoder dec;
  dec.init(rng, mc, 8, tok.tokens(), 4, 2);

  std::vector<Image> images;
  for (int i = 0; i < 8; ++i) images.push_back(random_image(rng, 16, 16));

  std::vector<ParamView> params;
  vit.collect("vit", params);
  dec.collect("dec", params);
  OptimConfig oc;
  AdamW optim(oc, params);

  auto eval_loss = [&]() {
    double total = 0.0;
    for (size_t i = 0; i < images.size(); ++i) {
      Rng mask_rng(derive_seed(99, "eval-mask", i));
      auto mask = sample_mask(tok.tokens(), 0.5, mask_rng);
      total += mae_step(tok, vit, dec, images[i], mask, nullptr, nullptr);
    }
    return total / static_cast<double>(images.size());
  };

  double before = eval_loss();
  for (int step = 0; step < 60; ++step) {
    VitClassifierGrad vg;
    MaeDecoderGrad dg;
    vg.zero_like(vit);
    dg.zero_like(dec);
    for (size_t i = 0; i < images.size(); ++i) {
      Rng mask_rng(derive_seed(7, "mask", static_cast<std::uint64_t>(step) * 100 + i));
      auto mask = sample_mask(tok.tokens(), 0.5, mask_rng);
      mae_step(tok, vit, dec, images[i], mask, &vg, &dg);
    }
    std::vector<ParamView> grads;
    vg.collect("vit", grads);
    dg.collect("dec", grads);
    for (auto& g : grads)
      for (Eigen::Index j = 0; j < g.size(); ++j) g.data[j] /= 8.0;
    optim.step(params, grads, 3e-3);
  }
  double after = eval_loss();
  CHECK(after < 0.5 * before);
}

TEST_CASE("frozen vl encoder output is invariant to unrelated training") {
  Rng rng(16);
  PatchTokenizer tok;
  tok.init(rng, 8, 32, 16);
  VlEncoder enc;
  enc.init(rng, 16, 2, 4);
  Image img = random_image(rng, 32, 32);

  Mat before = encode_vl(enc, tok.tokenize(img));
  std::vector<ParamView> views;
  enc.collect("clip", views);
  std::string bytes_before = serialize_views(views);

  // Train something unrelated (a separate classifier) and re-check.
  VitClassifier vit;
  vit.init(rng, 16, 1, 4);
  Mat after = encode_vl(enc, tok.tokenize(img));
  CHECK(before == after);
  CHECK(serialize_views(views) == bytes_before);
}
