#pragma once

#include "equiflow/flows.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace equiflow {

/// One certified property: pass iff value < threshold.
struct CheckResult {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
    std::string note;
};

class CheckReport {
public:
    void add(std::string name, double value, double threshold, std::string note = {});
    /// Records a check that threw; it counts as a failure.
    void add_failure(std::string name, std::string note);
    void merge(const CheckReport& other, const std::string& prefix = {});

    const std::vector<CheckResult>& results() const { return results_; }
    bool all_passed() const;
    std::size_t failures() const;

    std::string text() const;
    void write(const std::filesystem::path& dir) const;  // report.txt and report.csv

private:
    std::vector<CheckResult> results_;
};

/// Runs `fn` and records any exception as a failed check named `name`.
void guarded(CheckReport& report, const std::string& name, const std::function<void()>& fn);

/**
 * Property suite for a built flow: per-layer equivariance, generator commutation,
 * Lipschitz certificates, density invariance, round trips, log-det consistency and a
 * finite-difference gradient check of the NLL.
 */
CheckReport verify_flow(const FlowComposition& flow, std::uint64_t seed = 0);

/// Fresh models of every layer type plus the group, log-det and transport suites.
CheckReport builtin_suite(std::uint64_t seed = 0);

/// Moser example and universal-flow examples with their certified thresholds.
CheckReport transport_suite();

}  // namespace equiflow
