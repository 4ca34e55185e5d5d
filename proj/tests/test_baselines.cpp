#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "diffspot/baselines.hpp"
#include "diffspot/covergen.hpp"

namespace diffspot {
namespace {

std::filesystem::path temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("diffspot_baselines_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ArchConfig tiny_arch() {
  ArchConfig arch;
  arch.concat_index = 1;
  arch.width_factor = 0.0625;
  arch.input_scale = 96;
  return arch;
}

TrainSchedule quick_schedule(int base_epochs, int drop_epochs,
                             double lr = 0.01) {
  TrainSchedule schedule;
  schedule.base_lr = lr;
  schedule.drop_lr = lr * 0.1;
  schedule.epochs_at_base = base_epochs;
  schedule.epochs_at_drop = drop_epochs;
  schedule.input_scale = 96;
  schedule.max_side = 160;
  return schedule;
}

SynthSample same_sample(std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  SynthSample s;
  s.pair = make_same_pair(rng, 96, 96, id);
  s.kind = SampleKind::kSame;
  return s;
}

SynthSample local_sample(std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  const AlignedPair pair = make_same_pair(rng, 96, 96, id);
  GenConfig config;
  return synth_local_pair(pair, config, rng);
}

// Whole-cover mismatch: the embedding-level difference is global, which is
// the regime a pooled-embedding baseline can actually learn from.
SynthSample mismatch_sample(std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  const AlignedPair a = make_same_pair(rng, 96, 96, id + "_a");
  const AlignedPair b = make_same_pair(rng, 96, 96, id + "_b");
  SynthSample s;
  s.pair.design = a.design;
  s.pair.photo = b.photo;
  s.pair.pair_id = id;
  s.kind = SampleKind::kDifferent;
  return s;
}

double mean_loss(const LossHistory& history, int epoch) {
  double acc = 0;
  int n = 0;
  for (const StepRecord& r : history)
    if (r.epoch == epoch) {
      acc += r.total;
      ++n;
    }
  return acc / n;
}

TEST(ContrastiveLoss, MatchesHandComputedValues) {
  EXPECT_DOUBLE_EQ(contrastive_loss(0.0, 0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(contrastive_loss(1.0, 1, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(contrastive_loss(1.5, 1, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(contrastive_loss(0.5, 0, 1.0), 0.25);
  EXPECT_DOUBLE_EQ(contrastive_loss(0.25, 1, 1.0), 0.5625);
  double grad = 0;
  contrastive_loss(0.5, 0, 1.0, &grad);
  EXPECT_DOUBLE_EQ(grad, 1.0);
  contrastive_loss(0.25, 1, 1.0, &grad);
  EXPECT_DOUBLE_EQ(grad, -1.5);
  contrastive_loss(2.0, 1, 1.0, &grad);
  EXPECT_DOUBLE_EQ(grad, 0.0);
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
  const double margin = 1.0;
  const double h = 1e-6;
  for (int y : {0, 1}) {
    for (double d : {0.1, 0.5, 0.9, 2.0}) {
      double grad = 0;
      contrastive_loss(d, y, margin, &grad);
      const double fd = (contrastive_loss(d + h, y, margin) -
                         contrastive_loss(d - h, y, margin)) /
                        (2 * h);
      EXPECT_NEAR(grad, fd, 1e-6) << "y=" << y << " d=" << d;
    }
  }
}

TEST(ContrastiveLoss, NeverNegative) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i)
    EXPECT_GE(contrastive_loss(rng.uniform(0.0, 3.0), rng.bernoulli() ? 1 : 0,
                               rng.uniform(0.1, 2.0)),
              0.0);
}

TEST(Siamese, RequiresInitialization) {
  SiameseModel<float> model(tiny_arch());
  const SynthSample s = same_sample(4, "p");
  EXPECT_THROW(model.distance(s.pair), ModelNotTrained);
}

TEST(Siamese, IdenticalImagesAreExactlyZeroApart) {
  SiameseModel<float> model(tiny_arch());
  model.init_weights(5);
  AlignedPair pair = same_sample(6, "p").pair;
  pair.photo = pair.design;
  EXPECT_DOUBLE_EQ(model.distance(pair), 0.0);
}

TEST(Siamese, DistanceIsSymmetric) {
  SiameseModel<float> model(tiny_arch());
  model.init_weights(7);
  const AlignedPair pair = local_sample(8, "p").pair;
  AlignedPair swapped = pair;
  std::swap(swapped.design, swapped.photo);
  EXPECT_DOUBLE_EQ(model.distance(pair), model.distance(swapped));
}

TEST(Siamese, NormalizedEmbeddingsBoundTheDistance) {
  SiameseModel<float> model(tiny_arch());
  model.init_weights(9);
  for (int i = 0; i < 5; ++i) {
    const double d = model.distance(local_sample(20 + i, "p").pair);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0 + 1e-9);
  }
}

TEST(Siamese, TrainStepFeedsGradientsToEveryParameter) {
  SiameseModel<float> model(tiny_arch());
  model.init_weights(10);
  model.zero_grads();
  const double loss = model.train_step(local_sample(11, "p"));
  EXPECT_TRUE(std::isfinite(loss));
  for (const auto& p : model.params()) {
    bool any = false;
    for (float g : p->grad.data) any = any || g != 0.0f;
    EXPECT_TRUE(any) << p->name;
  }
}

TEST(Siamese, SaveLoadRoundTrip) {
  const auto dir = temp_dir("siamese");
  SiameseModel<float> model(tiny_arch(), 0.7);
  model.init_weights(12);
  const std::string path = (dir / "model.ckpt").string();
  model.save(path);
  SiameseModel<float> loaded = SiameseModel<float>::load(path);
  EXPECT_DOUBLE_EQ(loaded.margin(), 0.7);
  EXPECT_EQ(loaded.arch().concat_index, 1);
  EXPECT_DOUBLE_EQ(loaded.arch().width_factor, 0.0625);
  const AlignedPair pair = local_sample(13, "p").pair;
  EXPECT_DOUBLE_EQ(model.distance(pair), loaded.distance(pair));
  std::filesystem::remove_all(dir);
}

TEST(SiameseTraining, LossFallsAndClassesSeparate) {
  std::vector<SynthSample> data;
  for (int i = 0; i < 3; ++i)
    data.push_back(same_sample(100 + i, "s" + std::to_string(i)));
  for (int i = 0; i < 3; ++i)
    data.push_back(mismatch_sample(200 + i, "d" + std::to_string(i)));
  const TrainSchedule schedule = quick_schedule(4, 2);
  auto result = train_siamese(data, tiny_arch(), schedule, 7);
  ASSERT_EQ(result.history.size(), data.size() * schedule.total_epochs());
  EXPECT_LT(mean_loss(result.history, schedule.total_epochs() - 1),
            mean_loss(result.history, 0));
  double mean_same = 0, mean_diff = 0;
  for (int i = 0; i < 3; ++i) {
    mean_same += result.model->distance(data[i].pair) / 3.0;
    mean_diff += result.model->distance(data[3 + i].pair) / 3.0;
  }
  EXPECT_GT(mean_diff, mean_same);
}

TEST(BaselineTraining, DeterministicForAFixedSeed) {
  std::vector<SynthSample> data = {same_sample(30, "s"), local_sample(31, "d")};
  auto a = train_siamese(data, tiny_arch(), quick_schedule(1, 1), 13);
  auto b = train_siamese(data, tiny_arch(), quick_schedule(1, 1), 13);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i)
    EXPECT_EQ(a.history[i].total, b.history[i].total) << "step " << i;
  const auto pa = a.model->params(), pb = b.model->params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_EQ(pa[i]->value.data, pb[i]->value.data) << pa[i]->name;
}

TEST(BaselineTraining, EmptyDatasetThrows) {
  EXPECT_THROW(train_siamese({}, tiny_arch(), quick_schedule(1, 0), 1),
               NoValidSamples);
}

TEST(BaselineTraining, ExplodingRateRaisesDivergence) {
  std::vector<SynthSample> data = {same_sample(40, "s0"), same_sample(41, "s1"),
                                   local_sample(42, "d0"),
                                   local_sample(43, "d1")};
  TrainSchedule schedule = quick_schedule(3, 0, 1e8);
  schedule.clip_norm = 0;  // clipping off
  EXPECT_THROW(train_classifier(data, tiny_arch(), schedule, 3),
               DivergenceDetected);
}

TEST(Classifier, ForcesTheEarlyMergePoint) {
  ArchConfig arch = tiny_arch();
  arch.concat_index = 4;
  SixChannelClassifier<float> model(arch);
  EXPECT_EQ(model.arch().concat_index, 1);
  EXPECT_DOUBLE_EQ(model.arch().width_factor, arch.width_factor);
}

TEST(Classifier, RequiresInitialization) {
  SixChannelClassifier<float> model(tiny_arch());
  EXPECT_THROW(model.classify(same_sample(50, "p").pair), ModelNotTrained);
}

TEST(Classifier, UntrainedProbabilityIsValidEitherWayRound) {
  SixChannelClassifier<float> model(tiny_arch());
  model.init_weights(51);
  const AlignedPair pair = local_sample(52, "p").pair;
  AlignedPair swapped = pair;
  std::swap(swapped.design, swapped.photo);
  const double prob = model.classify(pair);
  EXPECT_GE(prob, 0.0);
  EXPECT_LE(prob, 1.0);
  const double prob_swapped = model.classify(swapped);
  EXPECT_GE(prob_swapped, 0.0);
  EXPECT_LE(prob_swapped, 1.0);
}

TEST(Classifier, TrainStepFeedsGradientsToEveryParameter) {
  SixChannelClassifier<float> model(tiny_arch());
  model.init_weights(53);
  model.zero_grads();
  const double loss = model.train_step(local_sample(54, "p"));
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  for (const auto& p : model.params()) {
    bool any = false;
    for (float g : p->grad.data) any = any || g != 0.0f;
    EXPECT_TRUE(any) << p->name;
  }
}

TEST(Classifier, SaveLoadRoundTrip) {
  const auto dir = temp_dir("classify");
  SixChannelClassifier<float> model(tiny_arch());
  model.init_weights(55);
  const std::string path = (dir / "model.ckpt").string();
  model.save(path);
  SixChannelClassifier<float> loaded = SixChannelClassifier<float>::load(path);
  EXPECT_EQ(loaded.arch().concat_index, 1);
  const AlignedPair pair = local_sample(56, "p").pair;
  EXPECT_DOUBLE_EQ(model.classify(pair), loaded.classify(pair));
  std::filesystem::remove_all(dir);
}

TEST(ClassifierTraining, LossFallsOnATinyProblem) {
  std::vector<SynthSample> data;
  for (int i = 0; i < 2; ++i)
    data.push_back(same_sample(300 + i, "s" + std::to_string(i)));
  for (int i = 0; i < 2; ++i)
    data.push_back(local_sample(400 + i, "d" + std::to_string(i)));
  const TrainSchedule schedule = quick_schedule(4, 2);
  auto result = train_classifier(data, tiny_arch(), schedule, 17);
  for (const StepRecord& r : result.history)
    EXPECT_TRUE(std::isfinite(r.total));
  EXPECT_LT(mean_loss(result.history, schedule.total_epochs() - 1),
            mean_loss(result.history, 0));
}

TEST(BaselineEval, SiameseScoresDriveTheRocPipeline) {
  SiameseModel<float> model(tiny_arch());
  model.init_weights(60);
  std::vector<SynthSample> set;
  set.push_back(same_sample(61, "s0"));
  set.push_back(same_sample(62, "s1"));
  set.push_back(local_sample(63, "d0"));
  set.push_back(local_sample(64, "d1"));
  const EvalReport report = evaluate_scores(set, [&](const SynthSample& s) {
    return siamese_distance(model, s.pair);
  });
  EXPECT_EQ(report.pairs.size(), 4u);
  EXPECT_EQ(report.skipped, 0);
  EXPECT_GE(report.roc.auc, 0.0);
  EXPECT_LE(report.roc.auc, 1.0);
}

}  // namespace
}  // namespace diffspot
