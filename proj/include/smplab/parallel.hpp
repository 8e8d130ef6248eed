#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace smplab {

/// Thread count: explicit request, else SMPLAB_THREADS, else hardware concurrency.
inline unsigned resolve_threads(unsigned requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("SMPLAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(begin, end) over contiguous chunks of [0, count).
///
/// The chunk layout does not depend on the thread count, so callers that
/// reduce per-chunk partials in chunk order get bit-identical results for any
/// number of threads.
template <class Fn>
void parallel_chunks(std::size_t count, std::size_t chunk, unsigned threads, Fn&& fn) {
    if (count == 0) return;
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t n_chunks = (count + chunk - 1) / chunk;
    threads = std::min<unsigned>(resolve_threads(threads), static_cast<unsigned>(n_chunks));
    auto run_chunk = [&](std::size_t c) {
        const std::size_t b = c * chunk;
        fn(c, b, std::min(count, b + chunk));
    };
    if (threads <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (unsigned w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t c = w; c < n_chunks; c += threads) run_chunk(c);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
    parallel_chunks(count, 64, threads, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) fn(i);
    });
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Independent engine for one (seed, stream, index) triple.
inline std::mt19937_64 stream_engine(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    const std::uint64_t a = splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
    const std::uint64_t b = splitmix64(a ^ splitmix64(index));
    std::seed_seq seq{static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32)};
    return std::mt19937_64(seq);
}

namespace streams {
inline constexpr std::uint64_t brownian = 1;
inline constexpr std::uint64_t diagnostics = 2;
}  // namespace streams

}  // namespace smplab
