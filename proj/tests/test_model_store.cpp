#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "msq/model_store.hpp"
#include "msq/trainer.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using msq::Tensor;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("msq_store_" + std::to_string(std::uintptr_t(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

msq::ModelConfig tiny_config() {
  msq::ModelConfig cfg;
  cfg.in_channels = 1;
  cfg.image_hw = 16;
  cfg.num_classes = 10;
  cfg.stem_channels = 8;
  cfg.stages = {{8, 1}, {16, 2}};
  cfg.candidates = msq::CandidateSet::make({8, 4, 2, 1});
  cfg.init_seed = 11;
  return cfg;
}

// a briefly-trained model so saved state is not all-initial
msq::ModelGraph trained_tiny_model() {
  auto model = msq::build_model(tiny_config());
  auto data = msq::synthetic_task(3, 96, 10);
  msq::TrainPlan plan;
  plan.candidates = model.cfg.candidates;
  plan.epochs = 1;
  plan.batch_size = 16;
  plan.warmup_iters = 4;
  plan.lr.initial = 0.05f;
  plan.seed = 5;
  msq::SgdState opt;
  msq::warmup(model, data, plan, opt);
  msq::dynamic_train(model, data, nullptr, plan, opt);
  return model;
}

}  // namespace

TEST_CASE("bundle save/load round trip is bit-exact", "[store]") {
  TempDir tmp;
  const auto path = (tmp.path / "model.msq").string();
  auto model = trained_tiny_model();
  msq::save_bundle(model, path, {{"note", "unit"}});

  auto loaded = msq::load_bundle(path);
  REQUIRE(loaded.model.state_hash() == model.state_hash());
  REQUIRE(loaded.model.cfg.candidates.bits == model.cfg.candidates.bits);
  REQUIRE(loaded.meta.at("note") == "unit");
  REQUIRE(loaded.model.stem_W.data() == model.stem_W.data());
  const auto i1 = model.theta_index(1);
  REQUIRE(loaded.model.blocks[1].bn.bank(i1).run_var ==
          model.blocks[1].bn.bank(i1).run_var);

  // save -> load -> save produces identical bytes
  const auto path2 = (tmp.path / "model2.msq").string();
  msq::save_bundle(loaded.model, path2, {{"note", "unit"}});
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::vector<char> ba((std::istreambuf_iterator<char>(a)),
                       std::istreambuf_iterator<char>());
  std::vector<char> bb((std::istreambuf_iterator<char>(b)),
                       std::istreambuf_iterator<char>());
  REQUIRE(ba == bb);
}

TEST_CASE("bundle format and integrity errors", "[store]") {
  TempDir tmp;
  const auto path = (tmp.path / "model.msq").string();
  auto model = msq::build_model(tiny_config());
  msq::save_bundle(model, path);

  SECTION("bad magic") {
    auto bad = (tmp.path / "bad.msq").string();
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes[0] = 'X';
    bytes[1] = 'X';
    std::ofstream(bad, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    REQUIRE_THROWS_AS(msq::load_bundle(bad), msq::FormatError);
  }
  SECTION("truncated header is a format error") {
    auto bad = (tmp.path / "trunc.msq").string();
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes.resize(40);  // cuts into the JSON header
    std::ofstream(bad, std::ios::binary).write(bytes.data(), 40);
    REQUIRE_THROWS_AS(msq::load_bundle(bad), msq::FormatError);
  }
  SECTION("truncated payload is an integrity error") {
    auto bad = (tmp.path / "short.msq").string();
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() - 200);
    std::ofstream(bad, std::ios::binary).write(bytes.data(), std::streamsize(bytes.size()));
    REQUIRE_THROWS_AS(msq::load_bundle(bad), msq::IntegrityError);
  }
  SECTION("payload corruption passes without checksum, caught with it") {
    auto flip_byte = [&](const std::string& src, const std::string& dst) {
      std::ifstream in(src, std::ios::binary);
      std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
      bytes[bytes.size() - 1] ^= 0x40;  // last byte of the final tensor blob
      std::ofstream(dst, std::ios::binary)
          .write(bytes.data(), std::streamsize(bytes.size()));
    };
    auto corrupt = (tmp.path / "corrupt.msq").string();
    flip_byte(path, corrupt);
    REQUIRE_NOTHROW(msq::load_bundle(corrupt));  // no checksum by default

    auto checked = (tmp.path / "checked.msq").string();
    msq::save_bundle(model, checked, {}, /*with_checksum=*/true);
    auto corrupted_checked = (tmp.path / "checked_bad.msq").string();
    flip_byte(checked, corrupted_checked);
    REQUIRE_THROWS_AS(msq::load_bundle(corrupted_checked), msq::IntegrityError);
  }
  SECTION("nonexistent file") {
    REQUIRE_THROWS_AS(msq::load_bundle((tmp.path / "nope.msq").string()),
                      msq::DataError);
  }
}

TEST_CASE("hot swap equivalence, purity and timing", "[store]") {
  auto model = trained_tiny_model();
  msq::Rng rng(123);
  const auto before = model.state_hash();

  for (int k : model.cfg.candidates.bits) {
    auto [mat, seconds] = msq::hot_swap(model, k);
    REQUIRE(seconds < 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      auto x = testutil::random_tensor({2, 1, 16, 16}, rng, -1.0f, 1.0f);
      auto expect = model.forward(x, msq::ForwardSpec::eval(k));
      auto got = mat.eval(x);
      INFO("k=" << k << " trial=" << trial);
      REQUIRE(got.data() == expect.data());  // bit-exact
    }
  }
  REQUIRE(model.state_hash() == before);

  SECTION("repeated hot swap materializes identical tensors") {
    auto [m1, t1] = msq::hot_swap(model, 8);
    auto [m2, t2] = msq::hot_swap(model, 8);
    REQUIRE(m1.convs.size() == m2.convs.size());
    for (std::size_t i = 0; i < m1.convs.size(); ++i) {
      REQUIRE(m1.convs[i].codes == m2.convs[i].codes);
      REQUIRE(m1.convs[i].step == m2.convs[i].step);
      REQUIRE(m1.pipeline.convs[i].W.data() == m2.pipeline.convs[i].W.data());
    }
  }
  SECTION("unknown candidate rejected") {
    REQUIRE_THROWS_AS(msq::hot_swap(model, 3), msq::CandidateError);
  }
}

TEST_CASE("export and import of materialized models", "[store]") {
  TempDir tmp;
  auto model = trained_tiny_model();

  SECTION("1-bit code payload packs to numel/8 bytes") {
    auto cfg = tiny_config();
    cfg.stages = {{64, 1}};
    cfg.stem_channels = 64;
    auto big = msq::build_model(cfg);
    auto [mat, secs] = msq::hot_swap(big, 1);
    const auto path = (tmp.path / "mat1.msq").string();
    msq::export_quantized(mat, path);
    auto raw = msq::storedetail::read_file(path);
    // layer1 is the 64x64x3x3 multiscale conv at 1 bit
    const auto& rec = raw.find("layer1.codes");
    REQUIRE(rec.shape == msq::Shape{64, 64, 3, 3});
    REQUIRE(rec.bytes == 64 * 64 * 3 * 3 / 8);  // 4608
  }
  SECTION("export -> import -> eval is bit-exact for every candidate") {
    msq::Rng rng(9);
    for (int k : {8, 4, 2, 1}) {
      auto [mat, secs] = msq::hot_swap(model, k);
      const auto path = (tmp.path / ("m" + std::to_string(k) + ".msq")).string();
      msq::export_quantized(mat, path);
      auto back = msq::import_materialized(path);
      REQUIRE(back.bits == k);
      auto x = testutil::random_tensor({3, 1, 16, 16}, rng, -1.0f, 1.0f);
      REQUIRE(back.eval(x).data() == mat.eval(x).data());
    }
  }
  SECTION("kind flags are enforced both ways") {
    const auto bundle_path = (tmp.path / "train.msq").string();
    msq::save_bundle(model, bundle_path);
    REQUIRE_THROWS_AS(msq::import_materialized(bundle_path), msq::ContractError);

    auto [mat, secs] = msq::hot_swap(model, 2);
    const auto mat_path = (tmp.path / "mat.msq").string();
    msq::export_quantized(mat, mat_path);
    REQUIRE_THROWS_AS(msq::load_bundle(mat_path), msq::ContractError);
  }
}
