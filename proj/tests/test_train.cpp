#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "sumnet/phantom.hpp"
#include "sumnet/training.hpp"

using namespace sumnet;

namespace {

std::filesystem::path temp_dir(const char* name) {
    const auto dir = std::filesystem::temp_directory_path() / "sumnet_train_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Plain scalar Adam, written independently of the production buffers: the
// oracle for update trajectories.
struct ScalarAdamRef {
    double m = 0.0, v = 0.0;
    long t = 0;
    double step(double theta, double g, double lr, double b1, double b2, double eps) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t));
        const double vh = v / (1 - std::pow(b2, t));
        return theta - lr * mh / (std::sqrt(vh) + eps);
    }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> column(const std::string& csv, int col) {
    std::vector<std::string> out;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string cell;
        for (int i = 0; i <= col; ++i) std::getline(ls, cell, ',');
        out.push_back(cell);
    }
    return out;
}

TrainConfig blob_config(const std::filesystem::path& dir, int n_patients, int frames,
                        int epochs, int batch_size) {
    write_phantom_dataset(dir / "data", 500, PhantomKind::Blob, 32, 32, n_patients, frames);
    TrainConfig cfg;
    cfg.manifest = (dir / "data" / "manifest.txt").string();
    cfg.checkpoint_dir = (dir / "ckpt").string();
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("adam_update: zero gradient leaves parameters unchanged") {
    std::vector<double> theta{0.5, -1.25}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
    const std::vector<double> before = theta;
    adam_update(theta, g, m, v, 1, AdamConfig{});
    REQUIRE(theta == before);
}

TEST_CASE("adam_update: first-step magnitude is ~lr for any gradient scale") {
    std::vector<double> theta{0.0}, g{0.3}, m{0.0}, v{0.0};
    AdamConfig cfg;
    adam_update(theta, g, m, v, 1, cfg);
    // bias correction makes m_hat = g and sqrt(v_hat) = |g| at t=1
    const double expected = -cfg.lr * 0.3 / (0.3 + cfg.eps);
    REQUIRE_THAT(theta[0], Catch::Matchers::WithinAbs(expected, 1e-15));
    REQUIRE_THAT(theta[0], Catch::Matchers::WithinAbs(-1e-3, 1e-9));
}

TEST_CASE("adam_update: 10-step trajectory matches the scalar reference") {
    Rng rng(5);
    double theta = 0.7;
    std::vector<double> th{theta}, m{0.0}, v{0.0};
    ScalarAdamRef ref;
    double theta_ref = theta;
    AdamConfig cfg;
    cfg.lr = 3e-3;
    for (long t = 1; t <= 10; ++t) {
        const double g = rng.uniform(-1.0, 1.0);
        std::vector<double> gv{g};
        adam_update(th, gv, m, v, t, cfg);
        theta_ref = ref.step(theta_ref, g, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        REQUIRE_THAT(th[0], Catch::Matchers::WithinAbs(theta_ref, 1e-12));
    }
}

TEST_CASE("adam_step: lr=0 keeps parameters bit-identical but advances state") {
    ModelParams params = build(SumNetConfig{}, 3);
    AdamState state(params);
    // give every parameter a gradient via a tiny training step
    Rng rng(9);
    Tensor x = rng.uniform_tensor({1, 1, 32, 32}, 0.0, 1.0);
    Tensor target = Tensor::zeros({1, 1, 32, 32});
    for (double& v : target.mutable_data()) v = rng.uniform01() < 0.5 ? 1.0 : 0.0;
    Tensor w = Tensor::full({1, 1, 32, 32}, 1.0);
    Tape tape;
    Tensor loss = wce_loss(forward(params, x, &tape), target, w, &tape);
    tape.backward(loss);

    std::vector<double> kernel_before(params.layers()[0].kernel.data().begin(),
                                      params.layers()[0].kernel.data().end());
    AdamConfig cfg;
    cfg.lr = 0.0;
    adam_step(params, state, cfg);
    REQUIRE(state.step_count() == 1);
    REQUIRE(std::equal(kernel_before.begin(), kernel_before.end(),
                       params.layers()[0].kernel.data().begin()));
    // moments moved even though parameters did not
    double m_norm = 0.0;
    for (double v : state.first_moments()[0].data()) m_norm += std::abs(v);
    REQUIRE(m_norm > 0.0);
}

TEST_CASE("adam_step: missing and non-finite gradients are reported") {
    ModelParams params = build(SumNetConfig{}, 3);
    AdamState state(params);
    REQUIRE_THROWS_AS(adam_step(params, state, AdamConfig{}), validation_error);
}

TEST_CASE("train config: parsing, defaults, validation") {
    std::istringstream in(
        "lr=0.002\nbatch_size=4\nepochs=3\nseed=99\nmanifest=m.txt\n"
        "fold=all\nthreshold=0.4\nw0=8\nsigma=3\n# comment\n\ncheckpoint_every=2\n");
    const TrainConfig cfg = parse_train_config(in, "/base");
    REQUIRE(cfg.lr == 0.002);
    REQUIRE(cfg.batch_size == 4);
    REQUIRE(cfg.epochs == 3);
    REQUIRE(cfg.seed == 99);
    REQUIRE(cfg.manifest == "/base/m.txt");
    REQUIRE(cfg.threshold == 0.4);
    REQUIRE(cfg.w0 == 8.0);
    REQUIRE(cfg.checkpoint_every == 2);
    // defaults hold where unset
    REQUIRE(cfg.beta1 == 0.9);
    REQUIRE(cfg.beta2 == 0.999);

    std::istringstream bad_key("nonsense=1\nmanifest=m\n");
    REQUIRE_THROWS_WITH(parse_train_config(bad_key, ""),
                        Catch::Matchers::ContainsSubstring("unknown key"));
    std::istringstream bad_lr("lr=-1\nmanifest=m\n");
    REQUIRE_THROWS_AS(parse_train_config(bad_lr, ""), validation_error);
    std::istringstream no_manifest("lr=0.1\n");
    REQUIRE_THROWS_AS(parse_train_config(no_manifest, ""), validation_error);
}

TEST_CASE("train: epochs=0 writes the initial checkpoint and an empty log body") {
    const auto dir = temp_dir("epochs0");
    const TrainConfig cfg = blob_config(dir, 1, 2, 0, 2);
    const TrainResult r = train(cfg);
    REQUIRE(std::filesystem::exists(r.latest_checkpoint));
    REQUIRE(std::filesystem::exists(r.best_checkpoint));
    const std::string log = slurp(r.log_path);
    REQUIRE(log == "step,epoch,loss,wall_time_s\n");
    REQUIRE(r.step_losses.empty());
}

TEST_CASE("train: two runs with the same seed produce identical loss columns") {
    const auto dir = temp_dir("determinism");
    TrainConfig cfg = blob_config(dir, 2, 2, 2, 2);

    const TrainResult r1 = train(cfg);
    const std::string log1 = slurp(r1.log_path);

    TrainConfig cfg2 = cfg;
    cfg2.checkpoint_dir = (dir / "ckpt2").string();
    const TrainResult r2 = train(cfg2);
    const std::string log2 = slurp(r2.log_path);

    REQUIRE(column(log1, 2) == column(log2, 2));  // loss column, %.17g
    REQUIRE(r1.step_losses.size() == 4);          // 2 epochs x (4 frames / batch 2)
}

TEST_CASE("train: fold selection keeps held-out patients out of gradients") {
    const auto dir = temp_dir("fold");
    TrainConfig cfg = blob_config(dir, 3, 2, 1, 2);
    cfg.fold = "0";
    const TrainResult r = train(cfg);
    const FoldSplit split = make_folds({"P000", "P001", "P002"}, 3, cfg.seed);
    for (const std::string& held : split.folds[0].held_out)
        REQUIRE(r.gradient_contributors.count(held) == 0);
    REQUIRE(r.gradient_contributors.size() == 2);
}

TEST_CASE("train: resume reproduces the unbroken loss trace") {
    const auto dir = temp_dir("resume");

    // unbroken 4-epoch run
    TrainConfig full_cfg = blob_config(dir, 2, 2, 4, 2);
    full_cfg.checkpoint_dir = (dir / "full").string();
    const TrainResult full = train(full_cfg);

    // 2 epochs, then resume to 4
    TrainConfig half_cfg = full_cfg;
    half_cfg.epochs = 2;
    half_cfg.checkpoint_dir = (dir / "half").string();
    const TrainResult half = train(half_cfg);

    TrainConfig resumed_cfg = half_cfg;
    resumed_cfg.epochs = 4;
    const TrainResult resumed = train(resumed_cfg, half.latest_checkpoint);

    REQUIRE(full.step_losses.size() == 8);
    REQUIRE(half.step_losses.size() == 4);
    REQUIRE(resumed.step_losses.size() == 4);
    for (int i = 0; i < 4; ++i) REQUIRE(resumed.step_losses[i] == full.step_losses[4 + i]);

    // final parameters agree bit-for-bit
    for (std::size_t l = 0; l < full.params.layers().size(); ++l)
        REQUIRE(std::equal(full.params.layers()[l].kernel.data().begin(),
                           full.params.layers()[l].kernel.data().end(),
                           resumed.params.layers()[l].kernel.data().begin()));
}

TEST_CASE("infer_frame: threshold semantics and cropping") {
    ModelParams params = build(SumNetConfig{}, 21);
    Rng rng(33);
    Tensor frame = rng.uniform_tensor({1, 1, 32, 32}, 0.0, 1.0);

    const FrameInference all_fg = infer_frame(params, frame, 0.0, 30, 31);
    REQUIRE(all_fg.mask.shape() == TensorShape{1, 1, 30, 31});
    for (double v : all_fg.mask.data()) REQUIRE(v == 1.0);  // p >= 0 always

    const FrameInference fi = infer_frame(params, frame, 0.5, 30, 31);
    for (std::size_t i = 0; i < fi.mask.data().size(); ++i)
        REQUIRE(fi.mask.data()[i] == (fi.prob.data()[i] >= 0.5 ? 1.0 : 0.0));
    REQUIRE(fi.seconds > 0.0);

    // fresh zero-bias params on any input give p = 0.5-ish everywhere; a
    // threshold above the ceiling empties the mask
    const FrameInference none = infer_frame(params, frame, 1.0, 30, 31);
    double fg = 0.0;
    for (double v : none.mask.data()) fg += v;
    REQUIRE(fg == 0.0);
}

TEST_CASE("infer_volume: stacked shapes and timing accounting") {
    const auto dir = temp_dir("infer_volume");
    write_phantom_dataset(dir / "data", 7, PhantomKind::Blob, 32, 32, 1, 3);
    const DatasetManifest m = load_manifest(dir / "data" / "manifest.txt");
    const VolumeRecord rec = load_volume(m.entries[0]);

    ModelParams params = build(SumNetConfig{}, 23);
    const VolumeInference vi = infer_volume(params, rec, 0.5);
    REQUIRE(vi.masks.shape() == TensorShape{3, 1, 32, 32});
    REQUIRE(vi.probs.shape() == vi.masks.shape());
    REQUIRE(vi.timing.per_frame_s.size() == 3);
    double total = 0.0;
    for (double s : vi.timing.per_frame_s) total += s;
    REQUIRE_THAT(vi.timing.total_s, Catch::Matchers::WithinAbs(total, 1e-12));
    REQUIRE_THAT(vi.timing.mean_s, Catch::Matchers::WithinAbs(total / 3.0, 1e-12));
}

TEST_CASE("crossval: 3 phantom patients, k=3") {
    const auto dir = temp_dir("crossval");
    TrainConfig cfg = blob_config(dir, 3, 2, 1, 2);
    cfg.k_folds = 0;  // leave-one-patient-out
    const CrossvalResult r = crossval(cfg);

    // every frame evaluated exactly once
    REQUIRE(r.frames.size() == 6);
    std::set<std::pair<std::string, int>> seen;
    for (const FrameMetrics& f : r.frames) REQUIRE(seen.insert({f.patient, f.frame}).second);

    // 3 fold rows + 1 aggregate row
    REQUIRE(r.table.size() == 4);
    REQUIRE(r.table[0].scope == "fold_0");
    REQUIRE(r.table[3].scope == "all");
    REQUIRE(r.table[3].n_frames == 6);

    REQUIRE(std::filesystem::exists(r.frame_csv));
    REQUIRE(std::filesystem::exists(r.aggregate_csv));
    // fold dirs removed by default
    REQUIRE(!std::filesystem::exists(dir / "ckpt" / "fold_0"));

    const std::string agg = slurp(r.aggregate_csv);
    REQUIRE(agg.find("dice_mean") != std::string::npos);
    const std::string frames_csv = slurp(r.frame_csv);
    REQUIRE(frames_csv.find("fold,patient,frame,dice") == 0);
}

TEST_CASE("aggregate of identical fold values collapses to v +/- 0") {
    std::vector<FrameMetrics> rows;
    for (int fold = 0; fold < 3; ++fold) {
        FrameMetrics f;
        f.fold = fold;
        f.patient = "P" + std::to_string(fold);
        f.dice = 0.75;
        rows.push_back(f);
    }
    const auto table = aggregate(rows, GroupBy::All);
    REQUIRE(table[0].metrics[0].mean == 0.75);
    REQUIRE(table[0].metrics[0].stddev == 0.0);
}
