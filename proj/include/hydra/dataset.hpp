#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hydra/errors.hpp"
#include "hydra/image_io.hpp"
#include "hydra/tensor.hpp"

namespace hydra {

struct Sample {
    Tensor image;        // [H x W x 3] in [0, 1]
    int label = 0;       // 0 real, 1 fake
    std::string subset;  // directory name, e.g. "fake_checker"
    std::string id;      // subset/filename
};

struct SubsetInfo {
    std::string name;
    int label = 0;
    int count = 0;
};

struct DatasetManifest {
    std::string root;  // directory holding manifest.json and the subset dirs
    std::uint64_t seed = 0;
    std::vector<SubsetInfo> subsets;
};

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json subsets = nlohmann::ordered_json::array();
    for (const auto& s : m.subsets) {
        subsets.push_back({{"name", s.name}, {"label", s.label}, {"count", s.count}});
    }
    return {{"seed", m.seed}, {"subsets", subsets}};
}

inline void save_manifest(const DatasetManifest& m) {
    std::ofstream out(std::filesystem::path(m.root) / "manifest.json");
    if (!out) throw FormatError("cannot write manifest under " + m.root);
    out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& root) {
    const auto path = std::filesystem::path(root) / "manifest.json";
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = root;
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& s : j.at("subsets")) {
        m.subsets.push_back({s.at("name").get<std::string>(), s.at("label").get<int>(),
                             s.at("count").get<int>()});
    }
    return m;
}

/// Load every sample listed by a manifest. File order within a subset is
/// sorted by name; sample ids are "subset/filename". Counts are checked
/// against the files actually on disk.
inline std::vector<Sample> load_samples(const DatasetManifest& m) {
    std::vector<Sample> samples;
    for (const auto& sub : m.subsets) {
        const auto dir = std::filesystem::path(m.root) / sub.name;
        if (!std::filesystem::is_directory(dir)) {
            throw FormatError("manifest subset directory missing: " + dir.string());
        }
        std::vector<std::string> files;
        for (const auto& e : std::filesystem::directory_iterator(dir)) {
            if (e.path().extension() == ".ppm") files.push_back(e.path().filename().string());
        }
        std::sort(files.begin(), files.end());
        if (static_cast<int>(files.size()) != sub.count) {
            throw FormatError("subset " + sub.name + " lists " + std::to_string(sub.count) +
                              " samples but has " + std::to_string(files.size()) + " files");
        }
        for (const auto& f : files) {
            Sample s;
            s.image = read_ppm((dir / f).string());
            s.label = sub.label;
            s.subset = sub.name;
            s.id = sub.name + "/" + f;
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

}  // namespace hydra
