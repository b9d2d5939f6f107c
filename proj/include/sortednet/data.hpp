#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sortednet/tensor.hpp"

namespace sortednet {

struct Dataset {
    int input_dim = 0;
    int num_classes = 0;
    std::vector<double> x; // row-major [n, input_dim]
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
    Tensor features(std::size_t begin, std::size_t count) const;
};

struct SplitDataset {
    Dataset train;
    Dataset test;
};

struct BlobSpec {
    std::vector<std::vector<double>> centers; // one center per class, any dimension
    std::vector<double> stds;                 // one per class
    int n_samples = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Gaussian blob classification data. Samples are allocated equally across
// classes, drawn per class, then split 80/20 per class by a seeded shuffle so
// both splits stay class-balanced. Pure function of spec + seed.
SplitDataset gen_blobs(const BlobSpec& spec);

// Harder blob task sized for grid experiments: `classes` Gaussian clusters at
// random directions of norm `center_scale` in `input_dim` dimensions.
SplitDataset gen_grid_task(int classes, int input_dim, int n, std::uint64_t seed,
                           double center_scale = 2.0, double cluster_std = 1.0);

// The Fig-style four-blob layout used by the order-dependency experiment.
BlobSpec four_blob_spec();

// ---- character corpus --------------------------------------------------------

// Byte-level vocabulary over the distinct printable-ASCII/newline characters
// of a corpus (sorted by byte value) plus one trailing UNK id.
struct CharVocab {
    std::string chars; // id -> char, sorted
    int unk_id = 0;    // == chars.size()

    int size() const { return static_cast<int>(chars.size()) + 1; }
    int encode(char c) const;
    char decode(int id) const; // UNK decodes to '?'
    std::string decode(const std::vector<int>& ids) const;
    std::vector<int> encode(const std::string& text) const;
};

struct TokenStream {
    std::vector<int> tokens;
    CharVocab vocab;
};

TokenStream tokenize_text(const std::string& text);
TokenStream load_char_corpus(const std::string& path);

// Small bundled text for the decoding experiments.
const std::string& builtin_corpus();

// CSV persistence: features..., label with a JSON sidecar recording the spec.
void save_dataset_csv(const Dataset& ds, const std::string& path);
Dataset load_dataset_csv(const std::string& path);

} // namespace sortednet
