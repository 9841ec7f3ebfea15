#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kgcot {

// Malformed or inconsistent input: files, configs, arguments. CLI exit code 1.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Chat/embedding provider failed after retries or returned an error payload.
// CLI exit code 2.
class ProviderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Casefold (ASCII), trim, and collapse internal whitespace runs to one space.
// Punctuation is kept: it distinguishes real biomedical labels.
std::string normalize_label(std::string_view text);

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);
std::vector<std::string> split(std::string_view line, char delim);

// Splits one delimited record. With quoted=true, RFC-4180 style double-quoted
// fields are honored (for comma-separated third-party exports).
std::vector<std::string> split_record(std::string_view line, char delim, bool quoted);

std::string sha256_hex(std::string_view data);

std::string read_file(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);

// Write-temp-then-rename so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

// Portable deterministic generator: splitmix64. std distributions are
// implementation-defined, so seeded shuffles go through these helpers.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next();
    // Uniform integer in [0, bound) by rejection sampling.
    std::uint64_t below(std::uint64_t bound);
    // Uniform double in [-1, 1).
    double symmetric_unit();

private:
    std::uint64_t state_;
};

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0);

template <typename T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
    SplitMix64 rng(seed);
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(items[i - 1], items[j]);
    }
}

// Runs task(i) for i in [0, count) on up to `workers` threads. Exceptions
// from tasks are rethrown (the first one by index) after all tasks finish.
void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t)>& task);

} // namespace kgcot
