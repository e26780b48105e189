#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "corrdst/dialogue.hpp"
#include "corrdst/pipeline.hpp"
#include "corrdst/rng.hpp"
#include "corrdst/schema.hpp"

namespace testing_support {

inline std::filesystem::path fixture(const std::string& name) {
    return std::filesystem::path(CORRDST_FIXTURE_DIR) / name;
}

inline std::filesystem::path golden(const std::string& name) {
    return std::filesystem::path(CORRDST_GOLDEN_DIR) / name;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("corrdst-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline const corrdst::SchemaTable& fixture_schema() {
    static const corrdst::SchemaTable schema = corrdst::SchemaTable::load(fixture("schema.json"));
    return schema;
}

inline const corrdst::DatasetSplit& fixture_train() {
    static const corrdst::DatasetSplit split =
        corrdst::load_dataset(fixture("train.jsonl"), fixture_schema(), {"train", true}).split;
    return split;
}

inline const corrdst::DatasetSplit& fixture_test() {
    static const corrdst::DatasetSplit split =
        corrdst::load_dataset(fixture("test.jsonl"), fixture_schema(), {"test", true}).split;
    return split;
}

/// Run configuration over the fixture corpus with oracle backends.
inline corrdst::pipeline::RunConfig fixture_config(const std::filesystem::path& out, double p_first = 0.0,
                                                   std::uint64_t noise_seed = 1) {
    corrdst::pipeline::RunConfig cfg;
    cfg.train_path = fixture("train.jsonl");
    cfg.eval_path = fixture("test.jsonl");
    cfg.schema_path = fixture("schema.json");
    cfg.synonyms_path = fixture("synonyms.json");
    cfg.output_dir = out;
    cfg.fraction = 0.5;
    cfg.split_seed = 11;
    cfg.demo_seed = 12;
    cfg.pair_seed = 13;
    cfg.max_concurrency = 3;
    cfg.inference_backend = {{"kind", "oracle"}, {"p", p_first}, {"seed", noise_seed}};
    cfg.correction_backend = {{"kind", "oracle"}, {"p", 0.0}, {"seed", 0}};
    cfg.embedding_backend = {{"kind", "hash"}, {"dim", 128}, {"seed", 3}};
    return cfg;
}

/// Random slot/value sets over a small alphabet, for property tests.
struct BeliefGen {
    std::vector<std::string> slots = {"hotel-area", "hotel-stars", "hotel-name", "taxi-leaveat",
                                      "train-day",  "restaurant-food"};
    std::vector<std::string> values = {"east", "west", "4", "cheap", "dontcare", "10:15", "guest house", "a-b"};

    template <typename Set>
    Set draw(corrdst::Rng& rng, std::size_t max_pairs = 6, double delete_rate = 0.0) const {
        Set out;
        const auto n = rng.below(max_pairs + 1);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& slot = slots[rng.below(slots.size())];
            if (delete_rate > 0.0 && rng.uniform01() < delete_rate) {
                out.set(slot, corrdst::kDeleteValue);
            } else {
                out.set(slot, values[rng.below(values.size())]);
            }
        }
        return out;
    }
};

}  // namespace testing_support
