#include "sortednet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sortednet/error.hpp"
#include "sortednet/rng.hpp"

namespace sortednet {

Tensor Dataset::features(std::size_t begin, std::size_t count) const {
    if (begin + count > size()) sn_fail("index_out_of_range", "dataset slice past end");
    std::vector<double> buf(x.begin() + static_cast<std::ptrdiff_t>(begin * input_dim),
                            x.begin() + static_cast<std::ptrdiff_t>((begin + count) * input_dim));
    return Tensor(Shape{static_cast<int>(count), input_dim}, std::move(buf));
}

void BlobSpec::validate() const {
    if (centers.empty() || centers.size() != stds.size()) {
        sn_fail("invalid_spec", "blob spec: need one center and one std per class");
    }
    const std::size_t d = centers[0].size();
    for (const auto& c : centers) {
        if (c.size() != d || d == 0) sn_fail("invalid_spec", "blob spec: inconsistent center dimensions");
    }
    for (double s : stds) {
        if (s < 0.0) sn_fail("invalid_spec", "blob spec: negative std");
    }
    if (n_samples < static_cast<int>(centers.size())) {
        sn_fail("invalid_spec", "blob spec: fewer samples than classes");
    }
}

SplitDataset gen_blobs(const BlobSpec& spec) {
    spec.validate();
    const int k = static_cast<int>(spec.centers.size());
    const int d = static_cast<int>(spec.centers[0].size());
    Rng rng(spec.seed);

    // equal allocation; remainder goes to the first classes
    std::vector<int> counts(static_cast<std::size_t>(k), spec.n_samples / k);
    for (int c = 0; c < spec.n_samples % k; ++c) counts[static_cast<std::size_t>(c)] += 1;

    SplitDataset out;
    out.train.input_dim = out.test.input_dim = d;
    out.train.num_classes = out.test.num_classes = k;

    struct Row {
        std::vector<double> x;
        int y;
    };
    std::vector<Row> train_rows;
    std::vector<Row> test_rows;

    for (int c = 0; c < k; ++c) {
        std::vector<Row> rows;
        rows.reserve(static_cast<std::size_t>(counts[static_cast<std::size_t>(c)]));
        for (int i = 0; i < counts[static_cast<std::size_t>(c)]; ++i) {
            Row r;
            r.y = c;
            r.x.resize(static_cast<std::size_t>(d));
            for (int j = 0; j < d; ++j) {
                r.x[static_cast<std::size_t>(j)] =
                    rng.normal(spec.centers[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)],
                               spec.stds[static_cast<std::size_t>(c)]);
            }
            rows.push_back(std::move(r));
        }
        rng.shuffle(rows);
        const std::size_t n_test = rows.size() / 5;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            (i < n_test ? test_rows : train_rows).push_back(std::move(rows[i]));
        }
    }
    rng.shuffle(train_rows);
    rng.shuffle(test_rows);

    auto pack = [d](const std::vector<Row>& rows, Dataset& ds) {
        ds.x.reserve(rows.size() * static_cast<std::size_t>(d));
        ds.y.reserve(rows.size());
        for (const Row& r : rows) {
            ds.x.insert(ds.x.end(), r.x.begin(), r.x.end());
            ds.y.push_back(r.y);
        }
    };
    pack(train_rows, out.train);
    pack(test_rows, out.test);
    return out;
}

SplitDataset gen_grid_task(int classes, int input_dim, int n, std::uint64_t seed, double center_scale,
                           double cluster_std) {
    if (classes < 2 || input_dim < 1 || n < classes) {
        sn_fail("invalid_spec", "grid task: need classes >= 2, input_dim >= 1, n >= classes");
    }
    // class centers at random directions, drawn from a dedicated stream so the
    // geometry is a function of the seed alone
    Rng center_rng(seed ^ 0x9e3779b97f4a7c15ull);
    BlobSpec spec;
    spec.n_samples = n;
    spec.seed = seed;
    for (int c = 0; c < classes; ++c) {
        std::vector<double> dir(static_cast<std::size_t>(input_dim));
        double norm = 0.0;
        for (double& v : dir) {
            v = center_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : dir) v = v / norm * center_scale;
        spec.centers.push_back(std::move(dir));
        spec.stds.push_back(cluster_std);
    }
    return gen_blobs(spec);
}

BlobSpec four_blob_spec() {
    BlobSpec spec;
    spec.centers = {{-2.0, 0.0}, {0.0, 2.0}, {2.0, 0.0}, {0.0, -2.0}};
    spec.stds = {0.5, 1.0, 0.5, 1.0};
    spec.n_samples = 1000;
    spec.seed = 42;
    return spec;
}

// ---- character corpus ---------------------------------------------------------

static bool keepable_char(unsigned char c) { return (c >= 0x20 && c <= 0x7e) || c == '\n'; }

int CharVocab::encode(char c) const {
    const auto pos = chars.find(c);
    return pos == std::string::npos ? unk_id : static_cast<int>(pos);
}

char CharVocab::decode(int id) const {
    if (id < 0 || id > unk_id) sn_fail("index_out_of_range", "vocab: id " + std::to_string(id));
    return id == unk_id ? '?' : chars[static_cast<std::size_t>(id)];
}

std::string CharVocab::decode(const std::vector<int>& ids) const {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) s.push_back(decode(id));
    return s;
}

std::vector<int> CharVocab::encode(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(encode(c));
    return ids;
}

TokenStream tokenize_text(const std::string& text) {
    if (text.empty()) sn_fail("empty_corpus", "corpus is empty");
    std::set<char> seen;
    for (char c : text) {
        if (keepable_char(static_cast<unsigned char>(c))) seen.insert(c);
    }
    TokenStream out;
    out.vocab.chars.assign(seen.begin(), seen.end());
    out.vocab.unk_id = static_cast<int>(out.vocab.chars.size());
    out.tokens.reserve(text.size());
    for (char c : text) {
        out.tokens.push_back(keepable_char(static_cast<unsigned char>(c)) ? out.vocab.encode(c) : out.vocab.unk_id);
    }
    return out;
}

TokenStream load_char_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) sn_fail("io_error", "cannot open corpus file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    if (!in.good() && !in.eof()) sn_fail("io_error", "failed reading corpus file " + path);
    const std::string text = buf.str();
    if (text.empty()) sn_fail("empty_corpus", "corpus file " + path + " is empty");
    return tokenize_text(text);
}

const std::string& builtin_corpus() {
    static const std::string text = [] {
        std::string base =
            "the little machine counted in whole numbers first, then in halves,\n"
            "then in tenths, and it kept a ledger of every remainder it had lost.\n"
            "each morning the clerk wound the crank ten times and read the sums\n"
            "aloud: one for the window, two for the door, three for the road.\n"
            "the machine never hurried. it carried ones the way a river carries\n"
            "small stones, patiently, and it rounded nothing that it could keep.\n"
            "when the clerk asked for the total, the machine printed the total.\n"
            "when the clerk asked again, it printed the same total again, digit\n"
            "for digit, because a sum that changes is not a sum but a rumor.\n"
            "the clerk kept the tape in a drawer marked: sums, exact, do not oil.\n";
        std::string out;
        for (int i = 0; i < 6; ++i) out += base;
        return out;
    }();
    return text;
}

void save_dataset_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out.is_open()) sn_fail("io_error", "cannot write dataset csv " + path);
    out.precision(17);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (int j = 0; j < ds.input_dim; ++j) {
            out << ds.x[i * static_cast<std::size_t>(ds.input_dim) + static_cast<std::size_t>(j)] << ',';
        }
        out << ds.y[i] << '\n';
    }
    if (!out.good()) sn_fail("io_error", "failed writing dataset csv " + path);
}

Dataset load_dataset_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) sn_fail("io_error", "cannot open dataset csv " + path);
    Dataset ds;
    std::string line;
    int max_label = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() < 2) sn_fail("parse_error", "dataset csv row too short in " + path);
        const int label = static_cast<int>(row.back());
        row.pop_back();
        if (ds.input_dim == 0) {
            ds.input_dim = static_cast<int>(row.size());
        } else if (ds.input_dim != static_cast<int>(row.size())) {
            sn_fail("parse_error", "dataset csv has ragged rows in " + path);
        }
        ds.x.insert(ds.x.end(), row.begin(), row.end());
        ds.y.push_back(label);
        max_label = std::max(max_label, label);
    }
    ds.num_classes = max_label + 1;
    if (ds.size() == 0) sn_fail("empty_dataset", "dataset csv " + path + " has no rows");
    return ds;
}

} // namespace sortednet
