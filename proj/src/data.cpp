#include "darts/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "darts/serialize.hpp"

namespace fs = std::filesystem;

namespace darts {

using ordered_json = nlohmann::ordered_json;

namespace {

std::vector<std::vector<double>> make_prototypes(std::size_t count, std::size_t dim,
                                                 std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> protos(count, std::vector<double>(dim));
    for (auto& p : protos) {
        for (double& v : p) v = rng.gaussian();
    }
    return protos;
}

// Task identity enters through a near-identity mixing matrix.
std::vector<double> make_mixing_matrix(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> m(dim * dim);
    const double scale = 0.35 / std::sqrt(static_cast<double>(dim));
    for (std::size_t r = 0; r < dim; ++r) {
        for (std::size_t c = 0; c < dim; ++c) {
            m[r * dim + c] = (r == c ? 1.0 : 0.0) + scale * rng.gaussian();
        }
    }
    return m;
}

Utterance make_utterance(const std::string& id, const SyntheticTaskConfig& cfg,
                         const std::vector<std::vector<double>>& protos,
                         const std::vector<double>& mix, Rng& rng) {
    const std::size_t D = cfg.feature_dim;
    const std::size_t n_labels = 1 + rng.uniform_index(cfg.max_label_len);
    LabelSequence labels(n_labels);
    for (auto& l : labels) l = 1 + static_cast<int>(rng.uniform_index(cfg.vocab_size - 1));

    std::vector<std::size_t> durations(n_labels);
    std::size_t total = 0;
    for (auto& d : durations) {
        d = cfg.seg_min + rng.uniform_index(cfg.seg_max - cfg.seg_min + 1);
        total += d;
    }
    // Stretch segments round-robin until the target stays feasible after
    // frontend downsampling: need ceil(T / guard) >= min frames.
    const std::size_t needed = cfg.downsample_guard * ctc_min_frames(labels);
    std::size_t cursor = 0;
    while (total < needed) {
        durations[cursor % n_labels] += 1;
        ++total;
        ++cursor;
    }

    // Frame for label v: mix * prototype[v], plus white noise.
    std::vector<double> frames;
    frames.reserve(total * D);
    for (std::size_t s = 0; s < n_labels; ++s) {
        const std::vector<double>& p = protos[static_cast<std::size_t>(labels[s]) - 1];
        std::vector<double> base(D, 0.0);
        for (std::size_t r = 0; r < D; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < D; ++c) acc += mix[r * D + c] * p[c];
            base[r] = acc;
        }
        for (std::size_t t = 0; t < durations[s]; ++t) {
            for (std::size_t r = 0; r < D; ++r) frames.push_back(base[r] + cfg.noise * rng.gaussian());
        }
    }
    Utterance u;
    u.id = id;
    u.features = Tensor::from_data({total, D}, std::move(frames));
    u.labels = std::move(labels);
    return u;
}

UtteranceSet make_split(const SyntheticTaskConfig& cfg, const std::string& split, std::size_t count,
                        std::uint64_t split_seed, const std::vector<std::vector<double>>& protos,
                        const std::vector<double>& mix) {
    UtteranceSet set;
    set.feature_dim = cfg.feature_dim;
    Rng rng(split_seed);
    set.items.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s-%04zu", split.c_str(), i);
        set.items.push_back(make_utterance(str(cfg.task_id, "-", idbuf), cfg, protos, mix, rng));
    }
    return set;
}

std::uint64_t hash_str(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

std::vector<std::string> synthetic_vocab(std::size_t vocab_size) {
    std::vector<std::string> vocab;
    vocab.reserve(vocab_size);
    vocab.push_back("<blank>");
    for (std::size_t i = 1; i < vocab_size; ++i) vocab.push_back(str("l", i));
    return vocab;
}

TaskData generate_synthetic_task(const SyntheticTaskConfig& cfg) {
    if (cfg.vocab_size < 2) throw ConfigError("generate_synthetic_task: vocab_size must be >= 2");
    if (cfg.seg_min < 2 || cfg.seg_max < cfg.seg_min) {
        throw ConfigError("generate_synthetic_task: need 2 <= seg_min <= seg_max");
    }
    if (cfg.noise < 0.0) throw ConfigError("generate_synthetic_task: noise must be >= 0");

    const auto protos = make_prototypes(cfg.vocab_size - 1, cfg.feature_dim, cfg.prototype_seed);
    const auto mix = make_mixing_matrix(cfg.feature_dim, derive_seed(cfg.seed ^ hash_str(cfg.task_id), 0));

    TaskData data;
    const std::uint64_t base = derive_seed(cfg.seed ^ hash_str(cfg.task_id), 1);
    data.train = make_split(cfg, "train", cfg.n_train, derive_seed(base, 1), protos, mix);
    data.val = make_split(cfg, "val", cfg.n_val, derive_seed(base, 2), protos, mix);
    data.test = make_split(cfg, "test", cfg.n_test, derive_seed(base, 3), protos, mix);
    return data;
}

void write_dataset(const UtteranceSet& set, const std::string& dir) {
    fs::create_directories(dir);

    std::string labels_text;
    for (const Utterance& u : set.items) {
        ordered_json rec;
        rec["id"] = u.id;
        rec["labels"] = u.labels;
        labels_text += rec.dump() + "\n";
    }
    const std::string labels_path = (fs::path(dir) / "labels.jsonl").string();
    {
        std::ofstream os(labels_path, std::ios::binary);
        if (!os) throw IoError(str("cannot open for write: ", labels_path));
        os.write(labels_text.data(), static_cast<std::streamsize>(labels_text.size()));
    }

    ordered_json manifest;
    manifest["format"] = "darts-forge-dataset";
    manifest["version"] = 1;
    manifest["feature_dim"] = set.feature_dim;
    manifest["count"] = set.items.size();
    manifest["labels_file"] = "labels.jsonl";
    manifest["labels_crc32"] = crc32_bytes(labels_text.data(), labels_text.size());
    ordered_json utts = ordered_json::array();
    for (std::size_t i = 0; i < set.items.size(); ++i) {
        const Utterance& u = set.items[i];
        char namebuf[32];
        std::snprintf(namebuf, sizeof(namebuf), "utt_%06zu.dftn", i);
        const std::string file = namebuf;
        const auto bytes = dftn_bytes(u.features);
        {
            std::ofstream os((fs::path(dir) / file).string(), std::ios::binary);
            if (!os) throw IoError(str("cannot open for write: ", file));
            os.write(reinterpret_cast<const char*>(bytes.data()),
                     static_cast<std::streamsize>(bytes.size()));
        }
        ordered_json rec;
        rec["id"] = u.id;
        rec["file"] = file;
        rec["frames"] = u.features.dim(0);
        rec["label_len"] = u.labels.size();
        rec["crc32"] = crc32_bytes(bytes.data(), bytes.size());
        utts.push_back(rec);
    }
    manifest["utterances"] = utts;

    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    std::ofstream os(manifest_path, std::ios::binary);
    if (!os) throw IoError(str("cannot open for write: ", manifest_path));
    const std::string text = manifest.dump(2) + "\n";
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

UtteranceSet read_dataset(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    std::ifstream ms(manifest_path, std::ios::binary);
    if (!ms) throw IoError(str("cannot open dataset manifest: ", manifest_path));
    ordered_json manifest;
    try {
        ms >> manifest;
    } catch (const std::exception& ex) {
        throw IoError(str("malformed header: manifest parse error: ", ex.what()));
    }
    if (manifest.value("format", "") != "darts-forge-dataset") {
        throw IoError(str("malformed header: not a darts-forge dataset: ", manifest_path));
    }

    UtteranceSet set;
    set.feature_dim = manifest.at("feature_dim").get<std::size_t>();

    // Labels first, keyed by id.
    const std::string labels_path =
        (fs::path(dir) / manifest.at("labels_file").get<std::string>()).string();
    {
        std::ifstream ls(labels_path, std::ios::binary);
        if (!ls) throw IoError(str("cannot open labels: ", labels_path));
        std::string text((std::istreambuf_iterator<char>(ls)), std::istreambuf_iterator<char>());
        const std::uint32_t crc = crc32_bytes(text.data(), text.size());
        if (crc != manifest.at("labels_crc32").get<std::uint32_t>()) {
            throw IoError(str("checksum mismatch in ", labels_path));
        }
    }
    std::ifstream ls(labels_path, std::ios::binary);
    std::map<std::string, LabelSequence> labels_by_id;
    std::string line;
    while (std::getline(ls, line)) {
        if (line.empty()) continue;
        ordered_json rec = ordered_json::parse(line);
        labels_by_id[rec.at("id").get<std::string>()] = rec.at("labels").get<LabelSequence>();
    }

    for (const auto& rec : manifest.at("utterances")) {
        const std::string file = rec.at("file").get<std::string>();
        const std::string path = (fs::path(dir) / file).string();
        const std::uint32_t expected = rec.at("crc32").get<std::uint32_t>();
        const std::uint32_t actual = crc32_file(path);
        if (expected != actual) {
            throw IoError(str("checksum mismatch in ", path, ": manifest ", expected, ", file ", actual));
        }
        Utterance u;
        u.id = rec.at("id").get<std::string>();
        u.features = read_dftn_file(path);
        if (u.features.rank() != 2 || u.features.dim(1) != set.feature_dim) {
            throw IoError(str("malformed header: feature shape ", shape_str(u.features.shape()),
                              " does not match dataset dim ", set.feature_dim));
        }
        auto it = labels_by_id.find(u.id);
        if (it == labels_by_id.end()) throw IoError(str("labels missing for utterance ", u.id));
        u.labels = it->second;
        set.items.push_back(std::move(u));
    }
    return set;
}

std::vector<Batch> make_batches(const UtteranceSet& set, std::size_t batch_size, std::uint64_t seed,
                                bool sort_by_length) {
    if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
    const std::size_t n = set.items.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    // Fisher-Yates with our own engine; std::shuffle is not reproducible
    // across standard libraries.
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.uniform_index(i);
        std::swap(order[i - 1], order[j]);
    }
    if (sort_by_length) {
        std::stable_sort(order.begin(), order.end(), [&set](std::size_t a, std::size_t b) {
            return set.items[a].features.dim(0) < set.items[b].features.dim(0);
        });
    }

    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; i += batch_size) {
        groups.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
    }
    // Shuffle batch order so length bucketing does not fix the curriculum.
    for (std::size_t i = groups.size(); i > 1; --i) {
        const std::size_t j = rng.uniform_index(i);
        std::swap(groups[i - 1], groups[j]);
    }

    std::vector<Batch> batches;
    batches.reserve(groups.size());
    for (const auto& g : groups) {
        Batch b;
        std::size_t t_max = 0;
        for (std::size_t idx : g) t_max = std::max(t_max, set.items[idx].features.dim(0));
        b.features = Tensor({g.size(), 1, t_max, set.feature_dim}, 0.0);
        for (std::size_t r = 0; r < g.size(); ++r) {
            const Utterance& u = set.items[g[r]];
            const std::size_t T = u.features.dim(0);
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < set.feature_dim; ++d) {
                    b.features.at4(r, 0, t, d) = u.features[t * set.feature_dim + d];
                }
            }
            b.lengths.push_back(T);
            b.labels.push_back(u.labels);
            b.ids.push_back(u.id);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace darts
