#pragma once

// Activation sources.
//
// SAEACT1 activation file (all little-endian):
//   offset  0  char[8]  magic "SAEACT1\0"
//   offset  8  u32      version (= 1)
//   offset 12  u32      d (row width)
//   offset 16  u64      n_rows
//   offset 24  f32[n_rows * d] row-major payload
//
// The planted source draws a random unit-norm dictionary and emits samples
// that are nonnegative sparse combinations of its rows plus gaussian noise.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sae/matrix.hpp"

namespace sae {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& what) {
    T v{};
    const auto offset = static_cast<long long>(is.tellg());
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw FormatError("truncated input reading " + what + " at offset " +
                          std::to_string(offset));
    return v;
}

inline void put_f32_span(std::ostream& os, std::span<const double> values) {
    std::vector<float> buf(values.begin(), values.end());
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

inline void get_f32_span(std::istream& is, std::span<double> out, const std::string& what) {
    std::vector<float> buf(out.size());
    const auto offset = static_cast<long long>(is.tellg());
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float))))
        throw FormatError("truncated input reading " + what + " at offset " +
                          std::to_string(offset));
    std::copy(buf.begin(), buf.end(), out.begin());
}

} // namespace io

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// SAEACT1 files

inline constexpr std::array<char, 8> kActMagic{'S', 'A', 'E', 'A', 'C', 'T', '1', '\0'};
inline constexpr std::uint32_t kActVersion = 1;
inline constexpr std::uint64_t kActHeaderBytes = 24;

// Streams rows to disk; n_rows in the header is patched on close().
class ActivationWriter {
public:
    ActivationWriter(const std::filesystem::path& path, std::size_t d) : path_(path), d_(d) {
        if (d == 0) throw std::invalid_argument("ActivationWriter: d must be >= 1");
        os_.open(path, std::ios::binary | std::ios::trunc);
        if (!os_) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
        os_.write(kActMagic.data(), kActMagic.size());
        io::put<std::uint32_t>(os_, kActVersion);
        io::put<std::uint32_t>(os_, static_cast<std::uint32_t>(d));
        io::put<std::uint64_t>(os_, 0);
    }
    ActivationWriter(const ActivationWriter&) = delete;
    ActivationWriter& operator=(const ActivationWriter&) = delete;
    ~ActivationWriter() {
        try {
            close();
        } catch (...) {
        }
    }

    void append(const Matrix& rows) {
        if (rows.cols() != d_)
            throw ShapeError("ActivationWriter: rows " + rows.shape() + " do not match d=" +
                             std::to_string(d_));
        io::put_f32_span(os_, rows.data());
        rows_ += rows.rows();
    }

    void close() {
        if (!os_.is_open()) return;
        os_.seekp(16);
        io::put<std::uint64_t>(os_, rows_);
        os_.close();
        if (os_.fail()) throw std::runtime_error("write to '" + path_.string() + "' failed");
    }

private:
    std::filesystem::path path_;
    std::size_t d_;
    std::uint64_t rows_ = 0;
    std::ofstream os_;
};

inline void write_activations(const std::filesystem::path& path, const Matrix& data) {
    ActivationWriter w(path, data.cols());
    w.append(data);
    w.close();
}

// Random-access reader; rows are fetched on demand.
class ActivationFileReader {
public:
    explicit ActivationFileReader(const std::filesystem::path& path,
                                  std::optional<std::size_t> expected_d = std::nullopt)
        : path_(path) {
        is_.open(path, std::ios::binary);
        if (!is_) throw std::runtime_error("cannot open activation file '" + path.string() + "'");
        std::array<char, 8> magic{};
        if (!is_.read(magic.data(), magic.size()) || magic != kActMagic)
            throw FormatError("'" + path.string() + "': bad magic, not an SAEACT1 file");
        const auto version = io::get<std::uint32_t>(is_, "version");
        if (version != kActVersion)
            throw FormatError("'" + path.string() + "': unsupported version " +
                              std::to_string(version));
        d_ = io::get<std::uint32_t>(is_, "d");
        n_rows_ = io::get<std::uint64_t>(is_, "n_rows");
        if (d_ == 0) throw FormatError("'" + path.string() + "': d must be >= 1");
        if (expected_d && *expected_d != d_)
            throw FormatError("'" + path.string() + "': d=" + std::to_string(d_) +
                              " but expected d=" + std::to_string(*expected_d));
        const auto expected = kActHeaderBytes + n_rows_ * d_ * sizeof(float);
        const auto actual = std::filesystem::file_size(path);
        if (actual < expected)
            throw FormatError("'" + path.string() + "': truncated payload, expected " +
                              std::to_string(expected) + " bytes, found " + std::to_string(actual));
    }

    std::size_t d() const noexcept { return d_; }
    std::uint64_t n_rows() const noexcept { return n_rows_; }
    const std::filesystem::path& path() const noexcept { return path_; }

    Matrix read_rows(std::uint64_t first, std::size_t count) {
        if (first + count > n_rows_)
            throw std::out_of_range("read_rows: [" + std::to_string(first) + ", " +
                                    std::to_string(first + count) + ") beyond " +
                                    std::to_string(n_rows_) + " rows");
        Matrix out(count, d_);
        is_.clear();
        is_.seekg(static_cast<std::streamoff>(kActHeaderBytes + first * d_ * sizeof(float)));
        io::get_f32_span(is_, out.data(), "rows of '" + path_.string() + "'");
        return out;
    }

private:
    std::filesystem::path path_;
    std::ifstream is_;
    std::size_t d_ = 0;
    std::uint64_t n_rows_ = 0;
};

inline Matrix read_activations(const std::filesystem::path& path,
                               std::optional<std::size_t> expected_d = std::nullopt) {
    ActivationFileReader r(path, expected_d);
    return r.read_rows(0, static_cast<std::size_t>(r.n_rows()));
}

// ---------------------------------------------------------------------------
// Planted dictionary

struct PlantedDictConfig {
    std::size_t d = 64;
    std::size_t m_true = 256;
    std::size_t k_min = 2;
    std::size_t k_max = 16;
    double coeff_min = 0.5;  // coefficients are log-uniform on [coeff_min, coeff_max]
    double coeff_max = 2.0;
    double noise_std = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (d < 1) throw std::invalid_argument("planted: d must be >= 1");
        if (!(1 <= k_min && k_min <= k_max && k_max <= m_true))
            throw std::invalid_argument("planted: need 1 <= k_min <= k_max <= m_true");
        if (!(coeff_min > 0.0 && coeff_min <= coeff_max))
            throw std::invalid_argument("planted: need 0 < coeff_min <= coeff_max");
        if (!(noise_std >= 0.0)) throw std::invalid_argument("planted: noise_std must be >= 0");
    }

    friend bool operator==(const PlantedDictConfig&, const PlantedDictConfig&) = default;
};

struct SparseCode {
    std::vector<std::uint32_t> indices;
    std::vector<double> coeffs;
};

struct PlantedData {
    Matrix data;
    Matrix dictionary;  // m_true x d, unit-norm rows
    std::vector<SparseCode> codes;
};

inline Matrix planted_dictionary(const PlantedDictConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 0));
    Matrix dict(cfg.m_true, cfg.d);
    for (std::size_t i = 0; i < cfg.m_true; ++i) {
        auto r = dict.row(i);
        double s = 0.0;
        while (s == 0.0) {
            s = 0.0;
            for (double& v : r) {
                v = rng.normal();
                s += v * v;
            }
        }
        const double n = std::sqrt(s);
        for (double& v : r) v /= n;
    }
    return dict;
}

// Sequential sample generator over a fixed dictionary. Stream 0 is the one
// generate_planted() uses; other streams give independent samples from the
// same dictionary (e.g. held-out evaluation data).
class PlantedSampler {
public:
    PlantedSampler(PlantedDictConfig cfg, std::shared_ptr<const Matrix> dict, std::uint64_t stream)
        : cfg_(cfg), dict_(std::move(dict)), rng_(derive_seed(cfg.seed, 1 + stream)),
          perm_(cfg.m_true) {
        std::iota(perm_.begin(), perm_.end(), 0u);
    }

    // Writes one sample into `out` and returns its (noise-free) code.
    SparseCode next(std::span<double> out) {
        SparseCode code;
        const std::size_t span = cfg_.k_max - cfg_.k_min + 1;
        const std::size_t s = cfg_.k_min + static_cast<std::size_t>(rng_.below(span));
        const double log_lo = std::log(cfg_.coeff_min), log_hi = std::log(cfg_.coeff_max);
        code.indices.reserve(s);
        code.coeffs.reserve(s);
        // Partial Fisher-Yates over a persistent permutation.
        for (std::size_t t = 0; t < s; ++t) {
            const std::size_t pick = t + static_cast<std::size_t>(rng_.below(cfg_.m_true - t));
            std::swap(perm_[t], perm_[pick]);
            code.indices.push_back(perm_[t]);
            code.coeffs.push_back(std::exp(rng_.uniform(log_lo, log_hi)));
        }
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t t = 0; t < s; ++t) {
            const auto r = dict_->row(code.indices[t]);
            for (std::size_t j = 0; j < out.size(); ++j) out[j] += code.coeffs[t] * r[j];
        }
        if (cfg_.noise_std > 0.0)
            for (double& v : out) v += cfg_.noise_std * rng_.normal();
        return code;
    }

    Matrix next_batch(std::size_t rows, std::vector<SparseCode>* codes = nullptr) {
        Matrix out(rows, cfg_.d);
        for (std::size_t i = 0; i < rows; ++i) {
            auto c = next(out.row(i));
            if (codes) codes->push_back(std::move(c));
        }
        return out;
    }

private:
    PlantedDictConfig cfg_;
    std::shared_ptr<const Matrix> dict_;
    Rng rng_;
    std::vector<std::uint32_t> perm_;
};

inline PlantedData generate_planted(const PlantedDictConfig& cfg, std::size_t n_samples) {
    auto dict = std::make_shared<const Matrix>(planted_dictionary(cfg));
    PlantedSampler sampler(cfg, dict, 0);
    PlantedData out;
    out.codes.reserve(n_samples);
    out.data = sampler.next_batch(n_samples, &out.codes);
    out.dictionary = *dict;
    return out;
}

// Noise-free reconstruction of samples from their codes.
inline Matrix reconstruct_from_codes(const Matrix& dictionary, std::span<const SparseCode> codes) {
    Matrix out(codes.size(), dictionary.cols());
    for (std::size_t i = 0; i < codes.size(); ++i) {
        auto r = out.row(i);
        for (std::size_t t = 0; t < codes[i].indices.size(); ++t) {
            const auto dr = dictionary.row(codes[i].indices[t]);
            for (std::size_t j = 0; j < r.size(); ++j) r[j] += codes[i].coeffs[t] * dr[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct Batch {
    Matrix rows;
    bool partial = false;
};

class BatchStream;

class ActivationDataset {
public:
    static ActivationDataset planted(const PlantedDictConfig& cfg, std::uint64_t n_samples,
                                     std::size_t batch_size, std::uint64_t stream = 0) {
        if (batch_size == 0) throw std::invalid_argument("dataset: batch_size must be >= 1");
        ActivationDataset ds;
        ds.planted_cfg_ = cfg;
        ds.dict_ = std::make_shared<const Matrix>(planted_dictionary(cfg));
        ds.d_ = cfg.d;
        ds.n_rows_ = n_samples;
        ds.batch_size_ = batch_size;
        ds.stream_ = stream;
        return ds;
    }

    static ActivationDataset file(const std::filesystem::path& path, std::size_t batch_size,
                                  std::optional<std::uint64_t> shuffle_seed = std::nullopt,
                                  std::optional<std::size_t> expected_d = std::nullopt) {
        if (batch_size == 0) throw std::invalid_argument("dataset: batch_size must be >= 1");
        ActivationFileReader r(path, expected_d);
        ActivationDataset ds;
        ds.path_ = path;
        ds.d_ = r.d();
        ds.n_rows_ = r.n_rows();
        ds.batch_size_ = batch_size;
        ds.shuffle_seed_ = shuffle_seed;
        return ds;
    }

    ActivationDataset with_batch_size(std::size_t batch_size) const {
        if (batch_size == 0) throw std::invalid_argument("dataset: batch_size must be >= 1");
        ActivationDataset ds = *this;
        ds.batch_size_ = batch_size;
        return ds;
    }

    std::size_t d() const noexcept { return d_; }
    std::uint64_t n_rows() const noexcept { return n_rows_; }
    std::size_t batch_size() const noexcept { return batch_size_; }
    std::uint64_t n_batches() const noexcept { return (n_rows_ + batch_size_ - 1) / batch_size_; }
    bool is_planted() const noexcept { return dict_ != nullptr; }
    const Matrix* ground_truth() const noexcept { return dict_.get(); }
    const std::optional<PlantedDictConfig>& planted_config() const noexcept { return planted_cfg_; }
    const std::optional<std::filesystem::path>& path() const noexcept { return path_; }

    BatchStream batches() const;

private:
    friend class BatchStream;
    ActivationDataset() = default;

    std::optional<PlantedDictConfig> planted_cfg_;
    std::shared_ptr<const Matrix> dict_;
    std::uint64_t stream_ = 0;
    std::optional<std::filesystem::path> path_;
    std::optional<std::uint64_t> shuffle_seed_;
    std::size_t d_ = 0;
    std::uint64_t n_rows_ = 0;
    std::size_t batch_size_ = 1;
};

class BatchStream {
public:
    std::optional<Batch> next();
    // Advances past `n` batches without returning them.
    void skip(std::uint64_t n) {
        for (std::uint64_t i = 0; i < n && next(); ++i) {
        }
    }
    std::uint64_t rows_emitted() const noexcept { return emitted_; }

private:
    friend class ActivationDataset;
    explicit BatchStream(ActivationDataset ds);

    ActivationDataset ds_;
    std::unique_ptr<PlantedSampler> sampler_;
    std::unique_ptr<ActivationFileReader> reader_;
    std::vector<std::uint64_t> chunk_order_;
    std::uint64_t next_chunk_ = 0;
    std::uint64_t emitted_ = 0;
    std::optional<Rng> row_shuffle_;
};

// Shuffling permutes whole batch-sized chunks (the trailing partial chunk
// stays last) and rows within each chunk, so reads remain sequential within a
// chunk and the file is never loaded whole.
inline BatchStream::BatchStream(ActivationDataset dataset) : ds_(std::move(dataset)) {
    const auto& ds = ds_;
    if (ds.dict_) {
        sampler_ = std::make_unique<PlantedSampler>(*ds.planted_cfg_, ds.dict_, ds.stream_);
        return;
    }
    reader_ = std::make_unique<ActivationFileReader>(*ds.path_);
    const std::uint64_t chunks = ds.n_batches();
    chunk_order_.resize(chunks);
    std::iota(chunk_order_.begin(), chunk_order_.end(), std::uint64_t{0});
    if (ds.shuffle_seed_) {
        Rng rng(*ds.shuffle_seed_);
        const std::uint64_t full = ds.n_rows_ / ds.batch_size_;
        for (std::uint64_t i = full; i > 1; --i) std::swap(chunk_order_[i - 1], chunk_order_[rng.below(i)]);
        row_shuffle_.emplace(derive_seed(*ds.shuffle_seed_, 1));
    }
}

inline std::optional<Batch> BatchStream::next() {
    const auto& ds = ds_;
    if (emitted_ >= ds.n_rows_) return std::nullopt;
    const std::size_t rows =
        static_cast<std::size_t>(std::min<std::uint64_t>(ds.batch_size_, ds.n_rows_ - emitted_));
    Batch b;
    b.partial = rows < ds.batch_size_;
    if (sampler_) {
        b.rows = sampler_->next_batch(rows);
    } else {
        const std::uint64_t chunk = chunk_order_[next_chunk_++];
        const std::uint64_t first = chunk * ds.batch_size_;
        const std::size_t count =
            static_cast<std::size_t>(std::min<std::uint64_t>(ds.batch_size_, ds.n_rows_ - first));
        b.rows = reader_->read_rows(first, count);
        b.partial = count < ds.batch_size_;
        if (row_shuffle_) {
            for (std::size_t i = count; i > 1; --i) {
                const std::size_t j = static_cast<std::size_t>(row_shuffle_->below(i));
                if (j != i - 1)
                    std::swap_ranges(b.rows.row(i - 1).begin(), b.rows.row(i - 1).end(),
                                     b.rows.row(j).begin());
            }
        }
    }
    emitted_ += b.rows.rows();
    return b;
}

inline BatchStream ActivationDataset::batches() const { return BatchStream(*this); }

} // namespace sae
