#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "charpipe/tensor.hpp"

namespace charpipe::testutil {

// Central-difference gradient check: perturbs every element of each input
// tensor and compares d(loss)/d(input) against the tape gradient. Returns the
// worst relative error (absolute error where the denominator is tiny).
inline double grad_check(const std::vector<Tensor>& inputs,
                         const std::function<Tensor()>& loss_fn, double h = 1e-5) {
    for (Tensor t : inputs) {
        t.node()->requires_grad = true;
        t.zero_grad();
    }
    double worst = 0.0;
    {
        GradTape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    for (const Tensor& t : inputs) {
        for (size_t i = 0; i < t.numel(); ++i) {
            real saved = t.val()[i];
            const_cast<std::vector<real>&>(t.val())[i] = saved + h;
            double lp = loss_fn().item();
            const_cast<std::vector<real>&>(t.val())[i] = saved - h;
            double lm = loss_fn().item();
            const_cast<std::vector<real>&>(t.val())[i] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double an = t.grad().size() == t.numel() ? t.grad()[i] : 0.0;
            double denom = std::max(std::abs(fd), std::abs(an));
            double err = denom > 1e-6 ? std::abs(fd - an) / denom : std::abs(fd - an);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Unique scratch directory under the build tree; removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("charpipe_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

} // namespace charpipe::testutil
