// Checkpoint blob format shared by all components: a text manifest with a
// (key, shape, offset, length) index followed by raw little-endian float32
// data. Round-trips are bit-exact.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "recap/core/errors.hpp"
#include "recap/core/hash.hpp"
#include "recap/core/params.hpp"

namespace recap {

struct TensorIndexEntry {
    std::string key;
    std::vector<int> shape;
    uint64_t offset = 0;  // bytes from start of data section
    uint64_t length = 0;  // bytes
};

struct CheckpointManifest {
    int version = 1;
    std::string component;
    int64_t step = 0;
    uint64_t config_hash = 0;
    std::vector<TensorIndexEntry> index;
};

using NamedBlobs = std::map<std::string, std::pair<std::vector<int>, std::vector<float>>>;

inline void save_checkpoint(const std::string& path, const std::string& component, int64_t step,
                            uint64_t config_hash, const NamedBlobs& tensors) {
    std::ostringstream head;
    head << "RECAP-CKPT 1\n";
    head << "component " << component << "\n";
    head << "step " << step << "\n";
    head << "config_hash " << hash_hex(config_hash) << "\n";
    head << "tensors " << tensors.size() << "\n";
    uint64_t offset = 0;
    for (const auto& [key, sv] : tensors) {
        head << key << " " << sv.first.size();
        for (int d : sv.first) head << " " << d;
        const uint64_t len = sv.second.size() * sizeof(float);
        head << " " << offset << " " << len << "\n";
        offset += len;
    }
    head << "DATA\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    const std::string h = head.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [key, sv] : tensors)
        out.write(reinterpret_cast<const char*>(sv.second.data()),
                  static_cast<std::streamsize>(sv.second.size() * sizeof(float)));
    if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

inline std::pair<CheckpointManifest, NamedBlobs> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("missing checkpoint '" + path + "'");
    CheckpointManifest man;
    std::string line;
    if (!std::getline(in, line) || line != "RECAP-CKPT 1") throw IoError("bad checkpoint header in '" + path + "'");
    std::string word;
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> word >> man.component;
        if (word != "component") throw IoError("bad manifest (component) in '" + path + "'");
    }
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> word >> man.step;
        if (word != "step") throw IoError("bad manifest (step) in '" + path + "'");
    }
    {
        std::getline(in, line);
        std::string hex;
        std::istringstream ls(line);
        ls >> word >> hex;
        if (word != "config_hash") throw IoError("bad manifest (config_hash) in '" + path + "'");
        man.config_hash = std::stoull(hex, nullptr, 16);
    }
    size_t count = 0;
    {
        std::getline(in, line);
        std::istringstream ls(line);
        ls >> word >> count;
        if (word != "tensors") throw IoError("bad manifest (tensors) in '" + path + "'");
    }
    for (size_t i = 0; i < count; ++i) {
        std::getline(in, line);
        std::istringstream ls(line);
        TensorIndexEntry e;
        size_t rank = 0;
        ls >> e.key >> rank;
        e.shape.resize(rank);
        for (size_t r = 0; r < rank; ++r) ls >> e.shape[r];
        ls >> e.offset >> e.length;
        if (!ls) throw IoError("bad tensor index line in '" + path + "'");
        man.index.push_back(std::move(e));
    }
    std::getline(in, line);
    if (line != "DATA") throw IoError("missing DATA marker in '" + path + "'");

    const std::streampos data_start = in.tellg();
    NamedBlobs blobs;
    for (const auto& e : man.index) {
        std::vector<float> v(e.length / sizeof(float));
        in.seekg(data_start + static_cast<std::streamoff>(e.offset));
        in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(e.length));
        if (!in) throw IoError("truncated checkpoint '" + path + "'");
        blobs[e.key] = {e.shape, std::move(v)};
    }
    return {man, blobs};
}

// ---- ParameterStore + Adam state round-trip ----

template <typename S>
NamedBlobs store_to_blobs(const ParameterStore<S>& store, const AdamOptimizer<S>* opt = nullptr) {
    NamedBlobs blobs;
    for (const auto& [k, t] : store.entries()) {
        std::vector<float> v(t->data.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t->data[i]);
        blobs["param." + k] = {t->shape, std::move(v)};
    }
    if (opt) {
        for (const auto& [k, m] : opt->first_moments()) {
            std::vector<float> v(m.begin(), m.end());
            blobs["adam_m." + k] = {{static_cast<int>(v.size())}, std::move(v)};
        }
        for (const auto& [k, m] : opt->second_moments()) {
            std::vector<float> v(m.begin(), m.end());
            blobs["adam_v." + k] = {{static_cast<int>(v.size())}, std::move(v)};
        }
    }
    return blobs;
}

template <typename S>
void blobs_to_store(const NamedBlobs& blobs, ParameterStore<S>& store, AdamOptimizer<S>* opt = nullptr) {
    std::map<std::string, std::vector<double>> ms, vs;
    for (const auto& [key, sv] : blobs) {
        if (key.rfind("param.", 0) == 0) {
            const std::string name = key.substr(6);
            auto t = store.at(name);
            if (t->data.size() != sv.second.size())
                throw DimensionError("checkpoint tensor '" + name + "' has wrong size");
            for (size_t i = 0; i < sv.second.size(); ++i) t->data[i] = static_cast<S>(sv.second[i]);
        } else if (key.rfind("adam_m.", 0) == 0) {
            ms[key.substr(7)] = std::vector<double>(sv.second.begin(), sv.second.end());
        } else if (key.rfind("adam_v.", 0) == 0) {
            vs[key.substr(7)] = std::vector<double>(sv.second.begin(), sv.second.end());
        }
    }
    if (opt && !ms.empty()) opt->load_moments(std::move(ms), std::move(vs));
}

template <typename S>
void save_store(const std::string& path, const std::string& component, int64_t step, uint64_t config_hash,
                const ParameterStore<S>& store, const AdamOptimizer<S>* opt = nullptr) {
    save_checkpoint(path, component, step, config_hash, store_to_blobs(store, opt));
}

// Loads a checkpoint into an already-constructed store, verifying component
// name and architecture hash compatibility.
template <typename S>
CheckpointManifest load_store(const std::string& path, const std::string& component, uint64_t config_hash,
                              ParameterStore<S>& store, AdamOptimizer<S>* opt = nullptr) {
    auto [man, blobs] = load_checkpoint(path);
    if (man.component != component)
        throw DependencyError("checkpoint '" + path + "' holds component '" + man.component + "', expected '" +
                              component + "'");
    if (man.config_hash != config_hash)
        throw DependencyError("checkpoint '" + path + "' was produced under an incompatible config (hash " +
                              hash_hex(man.config_hash) + " != " + hash_hex(config_hash) + ")");
    blobs_to_store(blobs, store, opt);
    store.set_step_count(man.step);
    return man;
}

}  // namespace recap
