#pragma once

// Chunked Monte-Carlo driver.  Chunk c always uses the stream derived
// from (seed, c) and chunk results are reduced in chunk order, so the
// estimate is bit-identical for any worker count.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <thread>
#include <vector>

#include "rng.hpp"

namespace rg {

struct MCConfig {
    std::int64_t samples = 10000;
    std::int64_t chunk_size = 1000;
    std::uint64_t seed = 1;
    int workers = 1;
};

struct EstimateWithError {
    double value = 0;
    double stderror = 0;
    std::int64_t samples = 0;
};

// accumulate fn(rng) over samples; the error is computed by batch means
// over chunks (chunks are the batches)
inline EstimateWithError mc_estimate(const MCConfig& mc,
                                     const std::function<double(Rng&)>& fn) {
    std::int64_t nchunks = (mc.samples + mc.chunk_size - 1) / mc.chunk_size;
    std::vector<double> chunk_mean(nchunks, 0.0);
    std::vector<std::int64_t> chunk_n(nchunks, 0);

    auto run_range = [&](std::int64_t c0, std::int64_t c1) {
        for (std::int64_t c = c0; c < c1; ++c) {
            Rng rng(mc.seed, (std::uint64_t)c);
            std::int64_t n = std::min(mc.chunk_size, mc.samples - c * mc.chunk_size);
            double s = 0;
            for (std::int64_t i = 0; i < n; ++i) s += fn(rng);
            chunk_mean[c] = s / (double)n;
            chunk_n[c] = n;
        }
    };

    int workers = std::max(1, mc.workers);
    if (workers == 1 || nchunks == 1) {
        run_range(0, nchunks);
    } else {
        std::vector<std::thread> pool;
        std::int64_t per = (nchunks + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            std::int64_t c0 = w * per, c1 = std::min(nchunks, c0 + per);
            if (c0 >= c1) break;
            pool.emplace_back(run_range, c0, c1);
        }
        for (auto& t : pool) t.join();
    }

    EstimateWithError est;
    double wsum = 0;
    for (std::int64_t c = 0; c < nchunks; ++c) {
        est.value += chunk_mean[c] * (double)chunk_n[c];
        wsum += (double)chunk_n[c];
        est.samples += chunk_n[c];
    }
    est.value /= wsum;
    if (nchunks > 1) {
        double var = 0;
        for (std::int64_t c = 0; c < nchunks; ++c) {
            double dlt = chunk_mean[c] - est.value;
            var += dlt * dlt * (double)chunk_n[c] / mc.chunk_size;
        }
        var /= (double)(nchunks - 1);
        est.stderror = std::sqrt(var / (double)nchunks);
    }
    if (!std::isfinite(est.value)) throw std::runtime_error("Monte-Carlo estimate is not finite");
    return est;
}

} // namespace rg
