#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tabdeco {

enum class ColumnKind { categorical, numerical };
enum class Task { binary, multiclass, regression };

std::string task_name(Task t);
Task task_from_name(const std::string& name);

struct LabelInfo {
    std::string name;
    Task task = Task::binary;
    // Encoded class order for classification. Binary: [negative, positive],
    // where the positive class is the lexicographically larger raw label
    // unless overridden. Multiclass: first appearance in the training split.
    std::vector<std::string> classes;

    int64_t n_classes() const {
        return task == Task::regression ? 1 : static_cast<int64_t>(classes.size());
    }
};

struct Schema {
    struct Column {
        std::string name;
        ColumnKind kind = ColumnKind::numerical;
    };

    std::vector<Column> columns;  // feature columns in file order
    LabelInfo label;
    // Per categorical column (in categorical order): fitted vocabulary in
    // code order. The reserved unseen bucket is code vocab.size(), so the
    // cardinality is vocab.size() + 1.
    std::vector<std::vector<std::string>> cat_vocabs;

    int64_t m() const { return static_cast<int64_t>(columns.size()); }
    int64_t m_cat() const { return static_cast<int64_t>(cat_vocabs.size()); }
    int64_t m_num() const { return m() - m_cat(); }
    std::vector<int64_t> cardinalities() const;
    bool feature_compatible(const Schema& other) const;
};

struct NormStats {
    // Per numerical column. Means double as the imputation value for missing
    // cells, which therefore normalize to exactly 0.
    std::vector<double> mean;
    std::vector<double> stddev;  // population std over non-missing values
};

struct Dataset {
    Schema schema;
    int64_t n_rows = 0;
    std::vector<int64_t> cat_codes;   // n x m_cat, row-major
    std::vector<float> num_values;    // n x m_num, row-major; NaN = missing
    std::vector<int64_t> labels_cls;  // classification targets
    std::vector<float> labels_reg;    // regression targets
    std::vector<int64_t> row_ids;     // original dataset indices
    std::optional<NormStats> norm;

    // Raw strings retained for split-time re-encoding and round-trip checks.
    std::vector<std::string> raw_cat;  // n x m_cat
    std::vector<std::string> raw_labels;

    int64_t cat_code(int64_t row, int64_t col) const {
        return cat_codes[row * schema.m_cat() + col];
    }
    float num_value(int64_t row, int64_t col) const {
        return num_values[row * schema.m_num() + col];
    }
};

struct Batch {
    int64_t size = 0;
    int64_t m_cat = 0;
    int64_t m_num = 0;
    std::vector<int64_t> cat_codes;   // size x m_cat
    std::vector<float> num_values;    // size x m_num
    std::vector<int64_t> labels_cls;
    std::vector<float> labels_reg;
    std::vector<int64_t> row_ids;
};

struct SchemaHint {
    std::string label_name;
    std::optional<Task> task;
    std::map<std::string, ColumnKind> kinds;
    std::optional<std::string> positive_label;
};

// Parses a schema hint file: one `name:kind` line per column, where kind is
// categorical | numerical | label_binary | label_multiclass |
// label_regression. Blank lines and lines starting with '#' are skipped.
SchemaHint parse_schema_hint_file(const std::string& path);

// Loads a CSV (RFC-4180-style, header row, '.' decimal point). Column kinds
// come from the hint where given and are inferred otherwise (every
// non-missing cell parseable as a number -> numerical, else categorical).
// Categorical codes are assigned by first appearance; empty cells are
// missing (numerical -> NaN, categorical -> the "" category). Task, when
// not declared: two distinct labels -> binary, more -> multiclass.
Dataset load_csv(const std::string& path, const SchemaHint& hint);
Dataset load_csv_text(const std::string& text, const SchemaHint& hint,
                      const std::string& origin = "<memory>");

// Re-encodes a CSV against an already-fitted schema (evaluation path):
// unseen categorical values map to the reserved bucket; an unseen
// classification label is an error.
Dataset load_csv_with_schema(const std::string& path, const Schema& schema);

// Seeded disjoint split into train/val/test. Sizes are floor(fraction * N)
// with remainder rows assigned to train. Categorical vocabularies and
// multiclass label classes are re-fitted on the training partition and all
// three outputs are re-encoded against them.
struct SplitResult {
    Dataset train, val, test;
};
SplitResult split(const Dataset& dataset, double train_frac, double val_frac, double test_frac,
                  uint64_t seed);

NormStats fit_normalization(const Dataset& train);
Dataset apply_normalization(const Dataset& dataset, const NormStats& stats);

// Mini-batches in seeded order. Pass seed ^ epoch for per-epoch reshuffles.
std::vector<Batch> batches(const Dataset& dataset, int64_t batch_size, bool shuffle,
                           uint64_t seed, bool drop_last);

}  // namespace tabdeco
