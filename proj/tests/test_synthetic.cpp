#include <catch2/catch.hpp>

#include <filesystem>
#include <set>

#include "stav/model.hpp"
#include "stav/synthetic.hpp"
#include "support.hpp"

using namespace stav;

TEST_CASE("generation is deterministic") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 32;
  cfg.sprite_size = 8;
  LabeledVideo a = generate_video(cfg, 2, 12345, "v");
  LabeledVideo b = generate_video(cfg, 2, 12345, "v");
  REQUIRE(a.frames.size() == b.frames.size());
  for (std::size_t t = 0; t < a.frames.size(); ++t)
    for (std::int64_t i = 0; i < a.frames[t].size(); ++i)
      REQUIRE(a.frames[t].data()[i] == b.frames[t].data()[i]);  // bit-identical
  LabeledVideo c = generate_video(cfg, 2, 12346, "v");
  bool any_diff = false;
  for (std::size_t t = 0; t < a.frames.size() && !any_diff; ++t)
    for (std::int64_t i = 0; i < a.frames[t].size() && !any_diff; ++i)
      any_diff = a.frames[t].data()[i] != c.frames[t].data()[i];
  CHECK(any_diff);  // different seed moves the sprite somewhere
}

TEST_CASE("out-of-window frames are the static background") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 32;
  cfg.sprite_size = 8;
  cfg.t_a = 3;
  cfg.t_b = 5;
  cfg.n_frames = 8;
  LabeledVideo v = generate_video(cfg, 0, 7, "v");
  std::vector<int> outside;
  for (int t = 1; t <= cfg.n_frames; ++t)
    if (t < v.gt_segment.t_start || t > v.gt_segment.t_end) outside.push_back(t - 1);
  REQUIRE(outside.size() == 5u);  // window length comes from the config
  for (std::size_t a = 1; a < outside.size(); ++a)
    for (std::int64_t i = 0; i < v.frames[0].size(); ++i)
      REQUIRE(v.frames[static_cast<std::size_t>(outside[a])].data()[i] ==
              v.frames[static_cast<std::size_t>(outside[0])].data()[i]);
  SECTION("sigma zero gives an all-zero background") {
    SynthConfig c0 = cfg;
    c0.noise_sigma = 0.0;
    LabeledVideo z = generate_video(c0, 0, 7, "v");
    const int bg = v.gt_segment.t_start == 1 ? cfg.n_frames - 1 : 0;
    for (std::int64_t i = 0; i < z.frames[0].size(); ++i)
      REQUIRE(z.frames[static_cast<std::size_t>(bg)].data()[i] == 0.0);
  }
}

TEST_CASE("ground truth boxes exist exactly inside the window") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 32;
  cfg.sprite_size = 6;
  for (int cls = 0; cls < 4; ++cls) {
    LabeledVideo v = generate_video(cfg, cls, 99 + static_cast<std::uint64_t>(cls), "v");
    CHECK(v.gt_segment.length() == cfg.t_b - cfg.t_a + 1);
    CHECK(v.gt_segment.t_start >= 1);
    CHECK(v.gt_segment.t_end <= cfg.n_frames);
    for (int t = 1; t <= cfg.n_frames; ++t)
      CHECK(v.gt_boxes[static_cast<std::size_t>(t - 1)].has_value() ==
            (t >= v.gt_segment.t_start && t <= v.gt_segment.t_end));
  }
}

TEST_CASE("boxes are tight around the sprite") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 40;
  cfg.sprite_size = 10;
  for (int cls = 0; cls < 4; ++cls) {
    LabeledVideo v = generate_video(cfg, cls, 31337 + static_cast<std::uint64_t>(cls), "v");
    for (int t = v.gt_segment.t_start; t <= v.gt_segment.t_end; ++t) {
      const auto& box = v.gt_boxes[static_cast<std::size_t>(t - 1)];
      REQUIRE(box.has_value());
      // Sprite pixels are exactly 1.0, background strictly below 0.5: the
      // thresholded tightest box must reproduce the ground truth box.
      auto derived = mask_to_bbox(v.frames[static_cast<std::size_t>(t - 1)], 0.5);
      REQUIRE(derived.has_value());
      CHECK(*derived == *box);
    }
  }
}

TEST_CASE("translate-right box advances by the configured step") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 48;
  cfg.sprite_size = 8;
  cfg.step = 4;
  LabeledVideo v = generate_video(cfg, 0, 5, "v");
  for (int t = v.gt_segment.t_start + 1; t <= v.gt_segment.t_end; ++t) {
    const auto& prev = v.gt_boxes[static_cast<std::size_t>(t - 2)];
    const auto& cur = v.gt_boxes[static_cast<std::size_t>(t - 1)];
    CHECK(cur->x_min - prev->x_min == cfg.step);
    CHECK(cur->y_min == prev->y_min);
  }
}

TEST_CASE("mirrored classes trace reversed trajectories") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 48;
  cfg.sprite_size = 8;
  LabeledVideo left = generate_video(cfg, 1, 5, "v");
  LabeledVideo up = generate_video(cfg, 3, 5, "v");
  REQUIRE(left.gt_segment == up.gt_segment);  // same video seed, same window
  for (int t = left.gt_segment.t_start + 1; t <= left.gt_segment.t_end; ++t) {
    const auto& lp = left.gt_boxes[static_cast<std::size_t>(t - 2)];
    const auto& lc = left.gt_boxes[static_cast<std::size_t>(t - 1)];
    CHECK(lc->x_min - lp->x_min == -cfg.step);
    CHECK(lc->y_min == lp->y_min);
    const auto& upp = up.gt_boxes[static_cast<std::size_t>(t - 2)];
    const auto& upc = up.gt_boxes[static_cast<std::size_t>(t - 1)];
    CHECK(upc->y_min - upp->y_min == -cfg.step);
  }
}

TEST_CASE("dataset splits") {
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 24;
  cfg.sprite_size = 6;
  cfg.train_per_class = 3;
  cfg.test_per_class = 2;
  Dataset d = generate_dataset(cfg);
  CHECK(d.train.size() == 12);
  CHECK(d.test.size() == 8);
  CHECK(d.train.size() + d.test.size() ==
        static_cast<std::size_t>((cfg.train_per_class + cfg.test_per_class) * cfg.n_classes));

  std::set<std::string> train_ids, test_ids;
  std::vector<int> train_hist(4, 0), test_hist(4, 0);
  for (const auto& v : d.train) {
    train_ids.insert(v.id);
    ++train_hist[static_cast<std::size_t>(v.label)];
  }
  for (const auto& v : d.test) {
    test_ids.insert(v.id);
    ++test_hist[static_cast<std::size_t>(v.label)];
  }
  CHECK(train_ids.size() == d.train.size());
  for (const auto& id : test_ids) CHECK(train_ids.count(id) == 0);
  for (int c = 0; c < 4; ++c) {
    CHECK(train_hist[static_cast<std::size_t>(c)] == cfg.train_per_class);
    CHECK(test_hist[static_cast<std::size_t>(c)] == cfg.test_per_class);
  }
}

TEST_CASE("stav container round trip is exact") {
  namespace fs = std::filesystem;
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 24;
  cfg.sprite_size = 6;
  LabeledVideo v = generate_video(cfg, 1, 4242, "vid0007");
  const fs::path path = fs::temp_directory_path() / "roundtrip.stav";
  write_stav(path.string(), v);
  LabeledVideo r = read_stav(path.string(), "vid0007");
  CHECK(r.label == v.label);
  CHECK(r.gt_segment == v.gt_segment);
  REQUIRE(r.frames.size() == v.frames.size());
  for (std::size_t t = 0; t < v.frames.size(); ++t) {
    REQUIRE(r.frames[t].shape() == v.frames[t].shape());
    for (std::int64_t i = 0; i < v.frames[t].size(); ++i)
      REQUIRE(r.frames[t].data()[i] == v.frames[t].data()[i]);  // f32-quantized at generation
    CHECK(r.gt_boxes[t].has_value() == v.gt_boxes[t].has_value());
    if (v.gt_boxes[t]) CHECK(*r.gt_boxes[t] == *v.gt_boxes[t]);
  }
  fs::remove(path);
}

TEST_CASE("invalid configs are rejected") {
  SynthConfig cfg;
  cfg.sprite_size = 100;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  SynthConfig cfg2;
  cfg2.t_a = 5;
  cfg2.t_b = 3;
  CHECK_THROWS_AS(cfg2.validate(), usage_error);
  SynthConfig cfg3;
  CHECK_THROWS_AS(generate_video(cfg3, 7, 1, "v"), usage_error);
}

TEST_CASE("frame features through the extractor") {
  Rng rng(51);
  FeatureExtractor ex(1, 4, rng);
  SynthConfig cfg;
  cfg.frame_h = cfg.frame_w = 24;
  cfg.sprite_size = 6;
  LabeledVideo v = generate_video(cfg, 0, 11, "v");

  SECTION("zeroed extractor maps to zero features") {
    FeatureExtractor z(1, 4, rng);
    for (Conv2d* c : {&z.c1, &z.c2, &z.c3}) {
      std::fill(c->weight.values().begin(), c->weight.values().end(), 0.0);
      std::fill(c->bias.values().begin(), c->bias.values().end(), 0.0);
    }
    Tape tape;
    Tensor f = z.forward(tape, v.frames[0], true, false);
    for (std::int64_t i = 0; i < f.size(); ++i) CHECK(f.data()[i] == 0.0);
  }

  SECTION("identical frames give identical features") {
    Tape tape;
    tape.set_recording(false);
    Tensor f1 = ex.forward(tape, v.frames[0], false, false);
    Tensor f2 = ex.forward(tape, v.frames[0], false, false);
    for (std::int64_t i = 0; i < f1.size(); ++i) CHECK(f1.data()[i] == f2.data()[i]);
  }

  SECTION("56x56 default lands on a 7x7 grid") {
    Rng r2(5);
    FeatureExtractor e56(1, 8, r2);
    Tape tape;
    Tensor f = e56.forward(tape, Tensor::zeros({1, 56, 56}), true, false);
    CHECK(f.shape() == Shape{8, 7, 7});
  }

  SECTION("gradients through the extractor") {
    // A random frame: generated frames have many exactly-equal pixels, which
    // parks relu pre-activations on their kinks.
    Rng r3(77);
    Tensor frame = Tensor::random_uniform({1, 24, 24}, r3, 0.0, 1.0);
    ParamList params;
    ex.register_params("ex", params);
    std::vector<std::pair<std::string, stav::Tensor*>> checked{{"frame", &frame}};
    for (auto& [name, t] : params.items) checked.push_back({name, t});
    auto r = testsupport::fd_check(checked, [&](Tape& t) {
      return reduce(t, Reduce::sum, tanh_op(t, ex.forward(t, frame, true, false)), {0, 1, 2});
    }, 1e-4);
    CAPTURE(r.worst);
    CHECK(r.max_rel < 1e-4);
  }
}
