// Line-delimited metrics. The canonical stream holds only deterministic
// fields so identical runs produce byte-identical logs; wall-clock times go
// to a sidecar file with the same (stage, step) keys.
#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "recap/core/errors.hpp"

namespace recap {

class MetricsWriter {
   public:
    MetricsWriter() = default;
    MetricsWriter(const std::string& metrics_path, const std::string& timings_path, bool append) {
        open(metrics_path, timings_path, append);
    }

    void open(const std::string& metrics_path, const std::string& timings_path, bool append) {
        const auto mode = append ? std::ios::app : std::ios::trunc;
        metrics_.open(metrics_path, std::ios::out | mode);
        if (!metrics_) throw IoError("cannot open metrics log '" + metrics_path + "'");
        timings_.open(timings_path, std::ios::out | mode);
        if (!timings_) throw IoError("cannot open timings log '" + timings_path + "'");
    }

    // `record` must carry "stage" and "step"; steps must strictly increase
    // within a stage over the lifetime of this writer.
    void write(nlohmann::json record, double wall_ms) {
        const std::string stage = record.at("stage");
        const int64_t step = record.at("step");
        auto it = last_step_.find(stage);
        if (it != last_step_.end() && step <= it->second)
            throw ConfigError("metrics step must strictly increase within stage '" + stage + "'");
        last_step_[stage] = step;
        metrics_ << record.dump() << "\n";
        metrics_.flush();
        timings_ << nlohmann::json({{"stage", stage}, {"step", step}, {"wall_ms", wall_ms}}).dump() << "\n";
        timings_.flush();
    }

   private:
    std::ofstream metrics_;
    std::ofstream timings_;
    std::map<std::string, int64_t> last_step_;
};

class WallTimer {
   public:
    WallTimer() : start_(std::chrono::steady_clock::now()) {}
    double elapsed_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    }
    void reset() { start_ = std::chrono::steady_clock::now(); }

   private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace recap
