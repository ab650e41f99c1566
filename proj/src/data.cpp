#include "tabdeco/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "tabdeco/errors.hpp"
#include "tabdeco/rng.hpp"

namespace tabdeco {

namespace {

constexpr float kMissingNumeric = std::numeric_limits<float>::quiet_NaN();

bool parse_number(const std::string& cell, double& out) {
    if (cell.empty()) {
        return false;
    }
    const char* begin = cell.c_str();
    char* end = nullptr;
    out = std::strtod(begin, &end);
    return end == begin + cell.size();
}

struct RawTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

// RFC-4180-style reader: comma separated, double quotes with "" escapes,
// CRLF or LF line endings. Newlines inside quoted fields are preserved.
RawTable parse_csv(const std::string& text, const std::string& origin) {
    RawTable table;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool any_char = false;

    auto end_field = [&] {
        record.push_back(field);
        field.clear();
    };
    auto end_record = [&] {
        end_field();
        if (table.header.empty()) {
            table.header = record;
        } else {
            table.rows.push_back(record);
        }
        record.clear();
        any_char = false;
    };

    for (size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        switch (c) {
            case '"':
                in_quotes = true;
                any_char = true;
                break;
            case ',':
                end_field();
                any_char = true;
                break;
            case '\r':
                break;
            case '\n':
                if (any_char || !field.empty() || !record.empty()) {
                    end_record();
                }
                break;
            default:
                field.push_back(c);
                any_char = true;
                break;
        }
    }
    if (any_char || !field.empty() || !record.empty()) {
        end_record();
    }

    if (in_quotes) {
        throw DataError(origin + ": unterminated quoted field");
    }
    if (table.header.empty()) {
        throw DataError(origin + ": empty file");
    }
    for (size_t r = 0; r < table.rows.size(); ++r) {
        if (table.rows[r].size() != table.header.size()) {
            throw DataError(origin + ": row " + std::to_string(r + 2) + " has " +
                            std::to_string(table.rows[r].size()) + " fields, expected " +
                            std::to_string(table.header.size()));
        }
    }
    if (table.rows.size() < 2) {
        throw DataError(origin + ": need at least 2 data rows, got " +
                        std::to_string(table.rows.size()));
    }
    return table;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(path + ": cannot open file");
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct ColumnLayout {
    std::vector<size_t> feature_cols;  // header indices of feature columns
    size_t label_col = 0;
    std::vector<ColumnKind> kinds;     // aligned with feature_cols
    std::vector<int64_t> cat_slot;     // feature index -> categorical slot or -1
    std::vector<int64_t> num_slot;     // feature index -> numerical slot or -1
};

ColumnLayout resolve_layout(const RawTable& table, const std::string& label_name,
                            const std::map<std::string, ColumnKind>& kind_hints,
                            const std::string& origin) {
    ColumnLayout layout;
    bool label_found = false;
    for (size_t c = 0; c < table.header.size(); ++c) {
        if (table.header[c] == label_name) {
            if (label_found) {
                throw DataError(origin + ": duplicate label column '" + label_name + "'");
            }
            layout.label_col = c;
            label_found = true;
        } else {
            layout.feature_cols.push_back(c);
        }
    }
    if (!label_found) {
        throw DataError(origin + ": label column '" + label_name + "' absent");
    }
    for (size_t i = 0; i < layout.feature_cols.size(); ++i) {
        for (size_t j = i + 1; j < layout.feature_cols.size(); ++j) {
            if (table.header[layout.feature_cols[i]] == table.header[layout.feature_cols[j]]) {
                throw DataError(origin + ": duplicate column name '" +
                                table.header[layout.feature_cols[i]] + "'");
            }
        }
    }

    for (const size_t c : layout.feature_cols) {
        const std::string& name = table.header[c];
        auto hint = kind_hints.find(name);
        if (hint != kind_hints.end()) {
            layout.kinds.push_back(hint->second);
            continue;
        }
        // inference: every non-missing cell parseable as a number
        bool numeric = true;
        bool any_value = false;
        for (const auto& row : table.rows) {
            const std::string& cell = row[c];
            if (cell.empty()) {
                continue;
            }
            any_value = true;
            double unused;
            if (!parse_number(cell, unused)) {
                numeric = false;
                break;
            }
        }
        layout.kinds.push_back(numeric && any_value ? ColumnKind::numerical
                                                    : ColumnKind::categorical);
    }

    int64_t cat = 0, num = 0;
    layout.cat_slot.assign(layout.feature_cols.size(), -1);
    layout.num_slot.assign(layout.feature_cols.size(), -1);
    for (size_t i = 0; i < layout.kinds.size(); ++i) {
        if (layout.kinds[i] == ColumnKind::categorical) {
            layout.cat_slot[i] = cat++;
        } else {
            layout.num_slot[i] = num++;
        }
    }
    return layout;
}

// First-appearance vocabulary over the given rows of one raw column.
std::vector<std::string> fit_vocab(const std::vector<std::string>& raw, int64_t n_rows,
                                   int64_t m_cat, int64_t col,
                                   const std::vector<int64_t>* row_subset) {
    std::vector<std::string> vocab;
    std::unordered_map<std::string, int64_t> seen;
    const int64_t count = row_subset ? static_cast<int64_t>(row_subset->size()) : n_rows;
    for (int64_t k = 0; k < count; ++k) {
        const int64_t r = row_subset ? (*row_subset)[k] : k;
        const std::string& v = raw[r * m_cat + col];
        if (seen.emplace(v, static_cast<int64_t>(vocab.size())).second) {
            vocab.push_back(v);
        }
    }
    return vocab;
}

int64_t encode_with_vocab(const std::vector<std::string>& vocab, const std::string& value) {
    for (size_t i = 0; i < vocab.size(); ++i) {
        if (vocab[i] == value) {
            return static_cast<int64_t>(i);
        }
    }
    return static_cast<int64_t>(vocab.size());  // reserved unseen bucket
}

void encode_labels(Dataset& ds, const std::string& origin) {
    const LabelInfo& label = ds.schema.label;
    ds.labels_cls.clear();
    ds.labels_reg.clear();
    if (label.task == Task::regression) {
        for (int64_t r = 0; r < ds.n_rows; ++r) {
            double v;
            if (!parse_number(ds.raw_labels[r], v)) {
                throw DataError(origin + ": non-numeric regression label '" + ds.raw_labels[r] +
                                "' in row " + std::to_string(r + 2));
            }
            ds.labels_reg.push_back(static_cast<float>(v));
        }
        return;
    }
    std::unordered_map<std::string, int64_t> index;
    for (size_t i = 0; i < label.classes.size(); ++i) {
        index[label.classes[i]] = static_cast<int64_t>(i);
    }
    for (int64_t r = 0; r < ds.n_rows; ++r) {
        auto it = index.find(ds.raw_labels[r]);
        if (it == index.end()) {
            throw DataError(origin + ": label '" + ds.raw_labels[r] + "' in row " +
                            std::to_string(r + 2) + " not present in the fitted classes");
        }
        ds.labels_cls.push_back(it->second);
    }
}

// Re-encodes categorical codes and labels of `ds` against `schema` (vocabs
// already fitted elsewhere). Numerical values are untouched.
void reencode(Dataset& ds, const Schema& schema, const std::string& origin) {
    ds.schema = schema;
    const int64_t m_cat = schema.m_cat();
    ds.cat_codes.assign(static_cast<size_t>(ds.n_rows * m_cat), 0);
    for (int64_t r = 0; r < ds.n_rows; ++r) {
        for (int64_t c = 0; c < m_cat; ++c) {
            ds.cat_codes[r * m_cat + c] =
                encode_with_vocab(schema.cat_vocabs[static_cast<size_t>(c)],
                                  ds.raw_cat[r * m_cat + c]);
        }
    }
    encode_labels(ds, origin);
}

Dataset subset_rows(const Dataset& ds, const std::vector<int64_t>& rows) {
    Dataset out;
    out.schema = ds.schema;
    out.n_rows = static_cast<int64_t>(rows.size());
    const int64_t m_cat = ds.schema.m_cat();
    const int64_t m_num = ds.schema.m_num();
    out.cat_codes.reserve(rows.size() * static_cast<size_t>(m_cat));
    out.num_values.reserve(rows.size() * static_cast<size_t>(m_num));
    out.raw_cat.reserve(rows.size() * static_cast<size_t>(m_cat));
    for (const int64_t r : rows) {
        for (int64_t c = 0; c < m_cat; ++c) {
            out.cat_codes.push_back(ds.cat_codes[r * m_cat + c]);
            out.raw_cat.push_back(ds.raw_cat[r * m_cat + c]);
        }
        for (int64_t c = 0; c < m_num; ++c) {
            out.num_values.push_back(ds.num_values[r * m_num + c]);
        }
        if (!ds.labels_cls.empty()) {
            out.labels_cls.push_back(ds.labels_cls[r]);
        }
        if (!ds.labels_reg.empty()) {
            out.labels_reg.push_back(ds.labels_reg[r]);
        }
        out.raw_labels.push_back(ds.raw_labels[r]);
        out.row_ids.push_back(ds.row_ids[r]);
    }
    out.norm = ds.norm;
    return out;
}

// Extracts raw cells into a frame with resolved column kinds; no vocabulary
// or label fitting happens here.
Dataset build_frame(const RawTable& table, const std::string& label_name,
                    const std::map<std::string, ColumnKind>& kind_hints,
                    const std::string& origin) {
    const ColumnLayout layout = resolve_layout(table, label_name, kind_hints, origin);
    const int64_t n = static_cast<int64_t>(table.rows.size());

    Dataset ds;
    ds.n_rows = n;
    for (size_t i = 0; i < layout.feature_cols.size(); ++i) {
        ds.schema.columns.push_back(
            {table.header[layout.feature_cols[i]], layout.kinds[i]});
    }
    ds.schema.label.name = label_name;

    const int64_t m_cat =
        std::count(layout.kinds.begin(), layout.kinds.end(), ColumnKind::categorical);
    const int64_t m_num = static_cast<int64_t>(layout.kinds.size()) - m_cat;

    ds.raw_cat.resize(static_cast<size_t>(n * m_cat));
    ds.num_values.resize(static_cast<size_t>(n * m_num));
    ds.raw_labels.resize(static_cast<size_t>(n));
    for (int64_t r = 0; r < n; ++r) {
        const auto& row = table.rows[static_cast<size_t>(r)];
        for (size_t i = 0; i < layout.feature_cols.size(); ++i) {
            const std::string& cell = row[layout.feature_cols[i]];
            if (layout.cat_slot[i] >= 0) {
                ds.raw_cat[r * m_cat + layout.cat_slot[i]] = cell;
            } else {
                float value = kMissingNumeric;
                if (!cell.empty()) {
                    double v;
                    if (!parse_number(cell, v)) {
                        throw DataError(origin + ": non-numeric value '" + cell + "' in row " +
                                        std::to_string(r + 2) + ", column '" +
                                        table.header[layout.feature_cols[i]] + "'");
                    }
                    value = static_cast<float>(v);
                }
                ds.num_values[r * m_num + layout.num_slot[i]] = value;
            }
        }
        ds.raw_labels[static_cast<size_t>(r)] = row[layout.label_col];
    }
    ds.row_ids.resize(static_cast<size_t>(n));
    std::iota(ds.row_ids.begin(), ds.row_ids.end(), int64_t{0});
    return ds;
}

Dataset build_dataset(const RawTable& table, const SchemaHint& hint, const std::string& origin) {
    Dataset ds = build_frame(table, hint.label_name, hint.kinds, origin);
    const int64_t n = ds.n_rows;
    const int64_t m_cat = static_cast<int64_t>(
        std::count_if(ds.schema.columns.begin(), ds.schema.columns.end(),
                      [](const Schema::Column& c) { return c.kind == ColumnKind::categorical; }));

    // categorical vocabularies by first appearance over all loaded rows
    for (int64_t c = 0; c < m_cat; ++c) {
        ds.schema.cat_vocabs.push_back(fit_vocab(ds.raw_cat, n, m_cat, c, nullptr));
    }

    // label classes and task
    std::vector<std::string> distinct;
    for (const std::string& v : ds.raw_labels) {
        if (std::find(distinct.begin(), distinct.end(), v) == distinct.end()) {
            distinct.push_back(v);
        }
    }
    Task task;
    if (hint.task.has_value()) {
        task = *hint.task;
    } else {
        task = distinct.size() == 2 ? Task::binary : Task::multiclass;
    }
    ds.schema.label.task = task;
    if (task == Task::binary) {
        if (distinct.size() != 2) {
            throw DataError(origin + ": binary task needs exactly 2 distinct labels, got " +
                            std::to_string(distinct.size()));
        }
        std::sort(distinct.begin(), distinct.end());
        if (hint.positive_label.has_value()) {
            if (*hint.positive_label != distinct[0] && *hint.positive_label != distinct[1]) {
                throw DataError(origin + ": positive label '" + *hint.positive_label +
                                "' not found among labels");
            }
            if (distinct[0] == *hint.positive_label) {
                std::swap(distinct[0], distinct[1]);
            }
        }
        // positive class last: lexicographically larger unless overridden
        ds.schema.label.classes = {distinct[0], distinct[1]};
    } else if (task == Task::multiclass) {
        if (distinct.size() < 2) {
            throw DataError(origin + ": classification needs at least 2 distinct labels");
        }
        ds.schema.label.classes = distinct;  // first appearance order
    }

    ds.cat_codes.assign(static_cast<size_t>(n * m_cat), 0);
    for (int64_t r = 0; r < n; ++r) {
        for (int64_t c = 0; c < m_cat; ++c) {
            ds.cat_codes[r * m_cat + c] = encode_with_vocab(
                ds.schema.cat_vocabs[static_cast<size_t>(c)], ds.raw_cat[r * m_cat + c]);
        }
    }
    encode_labels(ds, origin);
    return ds;
}

}  // namespace

std::string task_name(Task t) {
    switch (t) {
        case Task::binary: return "binary";
        case Task::multiclass: return "multiclass";
        case Task::regression: return "regression";
    }
    return "?";
}

Task task_from_name(const std::string& name) {
    if (name == "binary") return Task::binary;
    if (name == "multiclass") return Task::multiclass;
    if (name == "regression") return Task::regression;
    throw ConfigError("unknown task '" + name + "'");
}

std::vector<int64_t> Schema::cardinalities() const {
    std::vector<int64_t> out;
    out.reserve(cat_vocabs.size());
    for (const auto& vocab : cat_vocabs) {
        out.push_back(static_cast<int64_t>(vocab.size()) + 1);
    }
    return out;
}

bool Schema::feature_compatible(const Schema& other) const {
    if (columns.size() != other.columns.size()) {
        return false;
    }
    for (size_t i = 0; i < columns.size(); ++i) {
        if (columns[i].name != other.columns[i].name ||
            columns[i].kind != other.columns[i].kind) {
            return false;
        }
    }
    return true;
}

SchemaHint parse_schema_hint_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError(path + ": cannot open schema hint file");
    }
    SchemaHint hint;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const size_t colon = line.rfind(':');
        if (colon == std::string::npos) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected 'name:kind'");
        }
        const std::string name = line.substr(0, colon);
        const std::string kind = line.substr(colon + 1);
        if (kind == "categorical") {
            hint.kinds[name] = ColumnKind::categorical;
        } else if (kind == "numerical") {
            hint.kinds[name] = ColumnKind::numerical;
        } else if (kind == "label_binary") {
            hint.label_name = name;
            hint.task = Task::binary;
        } else if (kind == "label_multiclass") {
            hint.label_name = name;
            hint.task = Task::multiclass;
        } else if (kind == "label_regression") {
            hint.label_name = name;
            hint.task = Task::regression;
        } else {
            throw DataError(path + ":" + std::to_string(line_no) + ": unknown kind '" + kind +
                            "'");
        }
    }
    return hint;
}

Dataset load_csv(const std::string& path, const SchemaHint& hint) {
    return load_csv_text(read_file(path), hint, path);
}

Dataset load_csv_text(const std::string& text, const SchemaHint& hint,
                      const std::string& origin) {
    if (hint.label_name.empty()) {
        throw DataError(origin + ": no label column configured");
    }
    return build_dataset(parse_csv(text, origin), hint, origin);
}

Dataset load_csv_with_schema(const std::string& path, const Schema& schema) {
    std::map<std::string, ColumnKind> kinds;
    for (const auto& col : schema.columns) {
        kinds[col.name] = col.kind;
    }
    Dataset ds = build_frame(parse_csv(read_file(path), path), schema.label.name, kinds, path);
    if (!ds.schema.feature_compatible(schema)) {
        throw DataError(path + ": columns do not match the fitted schema");
    }
    reencode(ds, schema, path);
    return ds;
}

SplitResult split(const Dataset& dataset, double train_frac, double val_frac, double test_frac,
                  uint64_t seed) {
    if (train_frac <= 0 || val_frac <= 0 || test_frac <= 0) {
        throw DataError("split: fractions must be positive");
    }
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
        throw DataError("split: fractions sum to " +
                        std::to_string(train_frac + val_frac + test_frac) + ", expected 1");
    }
    const int64_t n = dataset.n_rows;
    const int64_t n_val = static_cast<int64_t>(std::floor(val_frac * static_cast<double>(n)));
    const int64_t n_test = static_cast<int64_t>(std::floor(test_frac * static_cast<double>(n)));
    const int64_t n_train = n - n_val - n_test;  // floor(train) + remainder
    if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
        throw DataError("split: a partition is empty (n=" + std::to_string(n) + ")");
    }

    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), int64_t{0});
    Rng rng(seed);
    rng.shuffle(perm);

    const std::vector<int64_t> train_rows(perm.begin(), perm.begin() + n_train);
    const std::vector<int64_t> val_rows(perm.begin() + n_train, perm.begin() + n_train + n_val);
    const std::vector<int64_t> test_rows(perm.begin() + n_train + n_val, perm.end());

    SplitResult out{subset_rows(dataset, train_rows), subset_rows(dataset, val_rows),
                    subset_rows(dataset, test_rows)};

    // Re-fit encodings on the training partition only.
    Schema fitted = dataset.schema;
    fitted.cat_vocabs.clear();
    const int64_t m_cat = dataset.schema.m_cat();
    for (int64_t c = 0; c < m_cat; ++c) {
        fitted.cat_vocabs.push_back(
            fit_vocab(out.train.raw_cat, out.train.n_rows, m_cat, c, nullptr));
    }
    if (fitted.label.task == Task::multiclass) {
        std::vector<std::string> classes;
        for (const std::string& v : out.train.raw_labels) {
            if (std::find(classes.begin(), classes.end(), v) == classes.end()) {
                classes.push_back(v);
            }
        }
        fitted.label.classes = classes;
    }
    reencode(out.train, fitted, "train split");
    reencode(out.val, fitted, "val split");
    reencode(out.test, fitted, "test split");
    return out;
}

NormStats fit_normalization(const Dataset& train) {
    const int64_t m_num = train.schema.m_num();
    NormStats stats;
    stats.mean.assign(static_cast<size_t>(m_num), 0.0);
    stats.stddev.assign(static_cast<size_t>(m_num), 0.0);
    for (int64_t c = 0; c < m_num; ++c) {
        double sum = 0.0;
        int64_t count = 0;
        for (int64_t r = 0; r < train.n_rows; ++r) {
            const float v = train.num_value(r, c);
            if (!std::isnan(v)) {
                sum += v;
                ++count;
            }
        }
        const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
        double ss = 0.0;
        for (int64_t r = 0; r < train.n_rows; ++r) {
            const float v = train.num_value(r, c);
            if (!std::isnan(v)) {
                ss += (v - mean) * (v - mean);
            }
        }
        stats.mean[static_cast<size_t>(c)] = mean;
        stats.stddev[static_cast<size_t>(c)] =
            count > 0 ? std::sqrt(ss / static_cast<double>(count)) : 0.0;
    }
    return stats;
}

Dataset apply_normalization(const Dataset& dataset, const NormStats& stats) {
    const int64_t m_num = dataset.schema.m_num();
    if (static_cast<int64_t>(stats.mean.size()) != m_num ||
        static_cast<int64_t>(stats.stddev.size()) != m_num) {
        throw DataError("apply_normalization: stats fitted for " +
                        std::to_string(stats.mean.size()) + " columns, dataset has " +
                        std::to_string(m_num));
    }
    Dataset out = dataset;
    for (int64_t r = 0; r < out.n_rows; ++r) {
        for (int64_t c = 0; c < m_num; ++c) {
            float& v = out.num_values[r * m_num + c];
            if (std::isnan(v)) {
                v = 0.0f;  // missing = imputed training mean, normalized
            } else {
                const double denom = std::max(stats.stddev[static_cast<size_t>(c)], 1e-8);
                v = static_cast<float>((v - stats.mean[static_cast<size_t>(c)]) / denom);
            }
        }
    }
    out.norm = stats;
    return out;
}

std::vector<Batch> batches(const Dataset& dataset, int64_t batch_size, bool shuffle,
                           uint64_t seed, bool drop_last) {
    if (batch_size < 1) {
        throw DataError("batches: batch size must be >= 1");
    }
    if (drop_last && batch_size > dataset.n_rows) {
        throw DataError("batches: batch size " + std::to_string(batch_size) +
                        " exceeds dataset size " + std::to_string(dataset.n_rows) +
                        " with drop_last");
    }
    std::vector<int64_t> order(static_cast<size_t>(dataset.n_rows));
    std::iota(order.begin(), order.end(), int64_t{0});
    if (shuffle) {
        Rng rng(seed);
        rng.shuffle(order);
    }
    const int64_t m_cat = dataset.schema.m_cat();
    const int64_t m_num = dataset.schema.m_num();
    std::vector<Batch> out;
    for (int64_t start = 0; start < dataset.n_rows; start += batch_size) {
        const int64_t size = std::min(batch_size, dataset.n_rows - start);
        if (size < batch_size && drop_last) {
            break;
        }
        Batch batch;
        batch.size = size;
        batch.m_cat = m_cat;
        batch.m_num = m_num;
        for (int64_t k = 0; k < size; ++k) {
            const int64_t r = order[static_cast<size_t>(start + k)];
            for (int64_t c = 0; c < m_cat; ++c) {
                batch.cat_codes.push_back(dataset.cat_code(r, c));
            }
            for (int64_t c = 0; c < m_num; ++c) {
                batch.num_values.push_back(dataset.num_value(r, c));
            }
            if (!dataset.labels_cls.empty()) {
                batch.labels_cls.push_back(dataset.labels_cls[r]);
            }
            if (!dataset.labels_reg.empty()) {
                batch.labels_reg.push_back(dataset.labels_reg[r]);
            }
            batch.row_ids.push_back(dataset.row_ids[r]);
        }
        out.push_back(std::move(batch));
    }
    return out;
}

}  // namespace tabdeco
