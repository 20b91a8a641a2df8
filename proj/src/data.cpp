#include "corereft/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "corereft/binio.hpp"
#include "corereft/error.hpp"
#include "corereft/rng.hpp"

namespace corereft::data {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

void Dataset::validate() const {
    if (inputs.rows() != labels.size()) {
        throw Error(ErrorKind::shape, "dataset has " + std::to_string(inputs.rows()) +
                                          " rows but " + std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
            throw Error(ErrorKind::argument, "label " + std::to_string(l) + " outside [0, " +
                                                 std::to_string(num_classes) + ")");
        }
    }
    if (!domains.empty() && domains.size() != labels.size()) {
        throw Error(ErrorKind::shape, "domain list length differs from label count");
    }
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.num_classes = num_classes;
    std::vector<double> buf;
    buf.reserve(rows.size() * dim());
    out.labels.reserve(rows.size());
    for (auto r : rows) {
        const auto src = inputs.row(r);
        buf.insert(buf.end(), src.begin(), src.end());
        out.labels.push_back(labels[r]);
        if (!domains.empty()) out.domains.push_back(domains[r]);
    }
    out.inputs = Matrix(rows.size(), dim(), std::move(buf));
    return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    if (a.dim() != b.dim()) throw Error(ErrorKind::shape, "concat of datasets with different dims");
    if (a.domains.empty() != b.domains.empty()) {
        throw Error(ErrorKind::argument, "concat of datasets with and without domains");
    }
    Dataset out;
    out.num_classes = std::max(a.num_classes, b.num_classes);
    std::vector<double> buf(a.inputs.storage());
    buf.insert(buf.end(), b.inputs.storage().begin(), b.inputs.storage().end());
    out.inputs = Matrix(a.size() + b.size(), a.dim(), std::move(buf));
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.domains = a.domains;
    out.domains.insert(out.domains.end(), b.domains.begin(), b.domains.end());
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

namespace {

Matrix gaussian_means(SeededRng& rng, std::size_t n, std::size_t dim, double scale) {
    Matrix m(n, dim);
    for (auto& x : m.values()) x = rng.normal() * scale;
    return m;
}

// Means z U with z ~ N(0, scale^2 I_k) and U a k x dim orthonormal basis.
Matrix subspace_means(SeededRng& rng, const Matrix& basis, std::size_t n, double scale) {
    const Matrix z = gaussian_means(rng, n, basis.rows(), scale);
    return linalg::matmul(z, basis);
}

Dataset sample_clusters(SeededRng& rng, const Matrix& means, std::size_t per_class, double noise) {
    Dataset ds;
    ds.num_classes = means.rows();
    const std::size_t dim = means.cols();
    std::vector<double> buf;
    buf.reserve(means.rows() * per_class * dim);
    for (std::size_t c = 0; c < means.rows(); ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t j = 0; j < dim; ++j) buf.push_back(means(c, j) + noise * rng.normal());
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    ds.inputs = Matrix(means.rows() * per_class, dim, std::move(buf));
    return ds;
}

void apply_affine(Matrix& x, const AffineMap& map) {
    const std::size_t dim = x.cols();
    std::vector<double> tmp(dim);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t i = 0; i < dim; ++i) tmp[i] = linalg::dot(map.A.row(i), row) + map.shift[i];
        std::copy(tmp.begin(), tmp.end(), row.begin());
    }
}

Matrix random_orthogonal(SeededRng& rng, std::size_t dim) {
    Matrix g(dim, dim);
    for (auto& x : g.values()) x = rng.normal();
    return linalg::orthonormalize_rows(g);
}

void check_generator_args(std::size_t n_classes, std::size_t dim, std::size_t per_class) {
    if (n_classes < 2) throw Error(ErrorKind::argument, "synthetic data needs >= 2 classes");
    if (dim < 1) throw Error(ErrorKind::argument, "synthetic data needs dim >= 1");
    if (per_class < 2) throw Error(ErrorKind::argument, "synthetic data needs >= 2 samples per class");
}

}  // namespace

AffineMap domain_gap_map(std::size_t dim, double gap_strength, std::uint64_t seed,
                         const Matrix* class_basis) {
    if (!(gap_strength >= 0.0) || !std::isfinite(gap_strength)) {
        throw Error(ErrorKind::argument, "gap_strength must be finite and >= 0");
    }
    SeededRng rng(seed);
    AffineMap map{Matrix::identity(dim), std::vector<double>(dim, 0.0)};
    if (gap_strength == 0.0) return map;

    if (class_basis && !class_basis->empty()) {
        // Amplify noise along a few directions orthogonal to the class subspace.
        constexpr std::size_t kNuisanceDirs = 2;
        constexpr double kNuisanceGain = 20.0;
        const Matrix& u = *class_basis;
        const std::size_t k = u.rows();
        if (u.cols() != dim || k + kNuisanceDirs > dim) {
            throw Error(ErrorKind::argument, "class basis " + u.shape() + " unusable for dim " +
                                                 std::to_string(dim));
        }
        Matrix g(k + kNuisanceDirs, dim);
        for (std::size_t i = 0; i < k; ++i)
            std::copy(u.row(i).begin(), u.row(i).end(), g.row(i).begin());
        for (std::size_t i = k; i < k + kNuisanceDirs; ++i)
            for (auto& x : g.row(i)) x = rng.normal();
        const Matrix q = linalg::orthonormalize_rows(g);
        const double gain = kNuisanceGain * gap_strength;
        for (std::size_t j = 0; j < kNuisanceDirs; ++j) {
            const auto v = q.row(k + j);
            for (std::size_t a = 0; a < dim; ++a)
                for (std::size_t b = 0; b < dim; ++b) map.A(a, b) += gain * v[a] * v[b];
        }
    } else {
        // Stretch a fixed subspace of dim/4 directions, then mix with a
        // rotation blended in by the gap strength.
        const std::size_t k = std::max<std::size_t>(1, dim / 4);
        const Matrix q = random_orthogonal(rng, dim);
        Matrix stretch = Matrix::identity(dim);
        for (std::size_t j = 0; j < k; ++j) {
            const double gain = gap_strength * rng.uniform(2.0, 4.0);
            const auto u = q.row(j);
            for (std::size_t a = 0; a < dim; ++a)
                for (std::size_t b = 0; b < dim; ++b) stretch(a, b) += gain * u[a] * u[b];
        }
        const Matrix rot = random_orthogonal(rng, dim);
        const double blend = std::min(1.0, gap_strength);
        Matrix mix(dim, dim);
        for (std::size_t a = 0; a < dim; ++a)
            for (std::size_t b = 0; b < dim; ++b)
                mix(a, b) = (1.0 - blend) * (a == b ? 1.0 : 0.0) + blend * rot(a, b);
        map.A = linalg::matmul(mix, stretch);
    }
    for (auto& v : map.shift) v = gap_strength * rng.normal();
    return map;
}

std::pair<Dataset, Dataset> make_synthetic_cil(std::size_t n_classes, std::size_t dim,
                                               std::size_t per_class, double gap_strength,
                                               std::uint64_t seed, ClusterSpec clusters) {
    check_generator_args(n_classes, dim, per_class);
    SeededRng root(seed);
    SeededRng base_rng(root.fork());
    SeededRng down_rng(root.fork());
    const std::uint64_t gap_seed = root.fork();
    SeededRng basis_rng(root.fork());
    Matrix basis;
    if (clusters.subspace > 0 && clusters.subspace < dim) {
        const Matrix q = random_orthogonal(basis_rng, dim);
        std::vector<double> rows(q.values().begin(),
                                 q.values().begin() + static_cast<std::ptrdiff_t>(clusters.subspace * dim));
        basis = Matrix(clusters.subspace, dim, std::move(rows));
    }

    auto draw_means = [&](SeededRng& rng) {
        if (clusters.subspace == 0 || clusters.subspace >= dim) {
            return gaussian_means(rng, n_classes, dim, clusters.mean_scale);
        }
        return subspace_means(rng, basis, n_classes, clusters.mean_scale);
    };
    const Matrix base_means = draw_means(base_rng);
    Dataset base = sample_clusters(base_rng, base_means, per_class, clusters.noise);

    const Matrix down_means = draw_means(down_rng);
    Dataset downstream = sample_clusters(down_rng, down_means, per_class, clusters.noise);
    if (gap_strength > 0.0) apply_affine(downstream.inputs, domain_gap_map(dim, gap_strength, gap_seed, &basis));
    linalg::require_finite(downstream.inputs.values(), "downstream inputs");
    return {std::move(base), std::move(downstream)};
}

std::vector<AffineMap> dil_domain_maps(std::size_t n_domains, std::size_t dim, std::uint64_t seed,
                                       double shift_scale) {
    SeededRng rng(seed);
    std::vector<AffineMap> maps;
    for (std::size_t d = 0; d < n_domains; ++d) {
        AffineMap m{random_orthogonal(rng, dim), std::vector<double>(dim)};
        for (auto& s : m.shift) s = shift_scale * rng.normal();
        maps.push_back(std::move(m));
    }
    return maps;
}

Dataset make_synthetic_dil(std::size_t n_domains, std::size_t n_classes, std::size_t per_class,
                           std::size_t dim, std::uint64_t seed, DilSpec spec) {
    if (n_domains < 2) throw Error(ErrorKind::argument, "DIL stream needs >= 2 domains");
    check_generator_args(n_classes, dim, per_class);
    SeededRng root(seed);
    SeededRng class_rng(root.fork());
    const auto maps = dil_domain_maps(n_domains, dim, root.fork(), spec.shift_scale);
    const Matrix means = gaussian_means(class_rng, n_classes, dim, spec.clusters.mean_scale);

    Dataset out;
    for (std::size_t d = 0; d < n_domains; ++d) {
        SeededRng sample_rng(root.fork());
        Dataset part = sample_clusters(sample_rng, means, per_class, spec.clusters.noise);
        apply_affine(part.inputs, maps[d]);
        part.domains.assign(part.size(), static_cast<int>(d));
        out = concat(out, part);
    }
    out.num_classes = n_classes;
    return out;
}

// ---------------------------------------------------------------------------
// Imbalance
// ---------------------------------------------------------------------------

void ImbalanceSpec::validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw Error(ErrorKind::argument, "imbalance alpha must be in (0, 1]");
    }
}

std::size_t imbalance_count(const ImbalanceSpec& spec, std::size_t i, std::size_t n_classes) {
    spec.validate();
    if (n_classes == 0) throw Error(ErrorKind::argument, "imbalance over zero classes");
    const double exact = static_cast<double>(spec.base_count) *
                         std::pow(spec.alpha, static_cast<double>(i) / static_cast<double>(n_classes));
    const auto rounded = static_cast<std::size_t>(std::floor(exact + 0.5));
    return std::max<std::size_t>(1, rounded);
}

namespace {

std::map<int, std::vector<std::size_t>> rows_by_class(const Dataset& ds) {
    std::map<int, std::vector<std::size_t>> out;
    for (std::size_t r = 0; r < ds.size(); ++r) out[ds.labels[r]].push_back(r);
    return out;
}

// Keep `keep(c)` samples of each class present in ds.
template <typename KeepFn>
Dataset keep_per_class(const Dataset& ds, SeededRng& rng, KeepFn keep) {
    auto by_class = rows_by_class(ds);
    std::vector<std::size_t> rows;
    for (auto& [cls, idx] : by_class) {
        const std::size_t n = keep(cls);
        if (idx.size() < n) {
            throw Error(ErrorKind::argument, "class " + std::to_string(cls) + " has " +
                                                 std::to_string(idx.size()) + " samples, needs " +
                                                 std::to_string(n));
        }
        rng.shuffle(std::span<std::size_t>(idx));
        std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
        std::sort(chosen.begin(), chosen.end());
        rows.insert(rows.end(), chosen.begin(), chosen.end());
    }
    return ds.subset(rows);
}

}  // namespace

Dataset imbalance_sample(const Dataset& ds, const ImbalanceSpec& spec, std::uint64_t seed) {
    spec.validate();
    ds.validate();
    const auto present = rows_by_class(ds);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        if (!present.contains(static_cast<int>(c))) {
            throw Error(ErrorKind::argument, "class " + std::to_string(c) + " has zero samples");
        }
    }
    SeededRng rng(seed);
    return keep_per_class(ds, rng, [&](int cls) {
        return imbalance_count(spec, static_cast<std::size_t>(cls) + 1, ds.num_classes);
    });
}

// ---------------------------------------------------------------------------
// Task streams
// ---------------------------------------------------------------------------

const char* to_string(Scenario s) {
    switch (s) {
        case Scenario::til: return "til";
        case Scenario::dil: return "dil";
        case Scenario::cil: return "cil";
    }
    return "?";
}

Scenario scenario_from_string(const std::string& s) {
    if (s == "til" || s == "TIL") return Scenario::til;
    if (s == "dil" || s == "DIL") return Scenario::dil;
    if (s == "cil" || s == "CIL") return Scenario::cil;
    throw Error(ErrorKind::argument, "unknown scenario '" + s + "' (expected til|dil|cil)");
}

void TaskStream::validate() const {
    if (tasks.empty()) throw Error(ErrorKind::argument, "task stream has no tasks");
    if (scenario == Scenario::dil) {
        std::set<int> domains;
        for (const auto& t : tasks) {
            if (t.classes != tasks.front().classes) {
                throw Error(ErrorKind::argument, "DIL tasks must share one class set");
            }
            if (!domains.insert(t.domain_id).second) {
                throw Error(ErrorKind::argument, "DIL domain ids must be distinct");
            }
        }
        return;
    }
    std::set<int> seen;
    for (const auto& t : tasks) {
        for (int c : t.classes) {
            if (!seen.insert(c).second) {
                throw Error(ErrorKind::argument, "class " + std::to_string(c) +
                                                     " appears in more than one task");
            }
        }
    }
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double test_fraction,
                                             std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
        throw Error(ErrorKind::argument, "test fraction must be in [0, 1)");
    }
    SeededRng rng(seed);
    std::vector<std::size_t> train_rows, test_rows;
    for (auto& [cls, idx] : rows_by_class(ds)) {
        rng.shuffle(std::span<std::size_t>(idx));
        const auto n = idx.size();
        const auto n_test = std::min(
            n - 1, static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(n) + 0.5)));
        std::vector<std::size_t> te(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
        std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
        std::sort(te.begin(), te.end());
        std::sort(tr.begin(), tr.end());
        test_rows.insert(test_rows.end(), te.begin(), te.end());
        train_rows.insert(train_rows.end(), tr.begin(), tr.end());
    }
    return {ds.subset(train_rows), ds.subset(test_rows)};
}

TaskStream split_tasks(const Dataset& ds, std::size_t inc, Scenario scenario, std::uint64_t seed,
                       double test_fraction) {
    ds.validate();
    if (scenario == Scenario::dil) {
        throw Error(ErrorKind::argument, "split_tasks builds CIL/TIL streams; use split_domains");
    }
    if (inc < 1) throw Error(ErrorKind::argument, "classes per task must be >= 1");
    if (inc > ds.num_classes) {
        throw Error(ErrorKind::argument, "classes per task " + std::to_string(inc) + " > " +
                                             std::to_string(ds.num_classes) + " classes");
    }
    SeededRng rng(seed);
    std::vector<int> order(ds.num_classes);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<int>(order));

    auto by_class = rows_by_class(ds);
    TaskStream stream;
    stream.scenario = scenario;
    for (std::size_t start = 0, t = 0; start < order.size(); start += inc, ++t) {
        Task task;
        task.task_id = t;
        const std::size_t end = std::min(order.size(), start + inc);
        task.classes.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(end));
        std::sort(task.classes.begin(), task.classes.end());
        std::vector<std::size_t> rows;
        for (int c : task.classes) {
            auto it = by_class.find(c);
            if (it == by_class.end()) {
                throw Error(ErrorKind::argument, "class " + std::to_string(c) + " has no samples");
            }
            rows.insert(rows.end(), it->second.begin(), it->second.end());
        }
        std::sort(rows.begin(), rows.end());
        auto [train, test] = stratified_split(ds.subset(rows), test_fraction, rng.fork());
        task.train = std::move(train);
        task.test = std::move(test);
        stream.tasks.push_back(std::move(task));
    }
    stream.validate();
    return stream;
}

TaskStream split_domains(const Dataset& ds, std::uint64_t seed, double test_fraction) {
    ds.validate();
    if (ds.domains.empty()) throw Error(ErrorKind::argument, "dataset has no domain ids");
    std::map<int, std::vector<std::size_t>> by_domain;
    for (std::size_t r = 0; r < ds.size(); ++r) by_domain[ds.domains[r]].push_back(r);
    std::vector<int> order;
    for (const auto& [d, _] : by_domain) order.push_back(d);

    SeededRng rng(seed);
    rng.shuffle(std::span<int>(order));

    std::set<int> class_set(ds.labels.begin(), ds.labels.end());
    const std::vector<int> classes(class_set.begin(), class_set.end());

    TaskStream stream;
    stream.scenario = Scenario::dil;
    for (std::size_t t = 0; t < order.size(); ++t) {
        Task task;
        task.task_id = t;
        task.domain_id = order[t];
        task.classes = classes;
        auto [train, test] = stratified_split(ds.subset(by_domain[order[t]]), test_fraction, rng.fork());
        task.train = std::move(train);
        task.test = std::move(test);
        stream.tasks.push_back(std::move(task));
    }
    stream.validate();
    return stream;
}

void apply_imbalance(TaskStream& stream, const ImbalanceSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::map<int, std::size_t> position;  // class -> 1-based index in stream order
    for (const auto& t : stream.tasks)
        for (int c : t.classes) position.emplace(c, position.size() + 1);
    const std::size_t n = position.size();
    SeededRng rng(seed);
    for (auto& t : stream.tasks) {
        t.train = keep_per_class(t.train, rng, [&](int cls) {
            return imbalance_count(spec, position.at(cls), n);
        });
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t at, const std::string& path) {
    if (bytes.size() < at + 4) throw Error(ErrorKind::format, "truncated IDX header in '" + path + "'");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
    return v;
}

void put_be32(std::string& out, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

}  // namespace

Matrix load_idx_images(const std::string& path) {
    const std::string bytes = io::read_file(path);
    const auto magic = read_be32(bytes, 0, path);
    if (magic != kIdxImages) {
        throw Error(ErrorKind::format, "'" + path + "' has IDX magic " + std::to_string(magic) +
                                           ", expected 0x00000803");
    }
    const std::size_t n = read_be32(bytes, 4, path);
    const std::size_t rows = read_be32(bytes, 8, path);
    const std::size_t cols = read_be32(bytes, 12, path);
    const std::size_t need = 16 + n * rows * cols;
    if (bytes.size() < need) throw Error(ErrorKind::format, "truncated IDX pixel data in '" + path + "'");
    std::vector<double> buf(n * rows * cols);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        buf[i] = static_cast<unsigned char>(bytes[16 + i]) / 255.0;
    }
    return Matrix(n, rows * cols, std::move(buf));
}

std::vector<int> load_idx_labels(const std::string& path) {
    const std::string bytes = io::read_file(path);
    const auto magic = read_be32(bytes, 0, path);
    if (magic != kIdxLabels) {
        throw Error(ErrorKind::format, "'" + path + "' has IDX magic " + std::to_string(magic) +
                                           ", expected 0x00000801");
    }
    const std::size_t n = read_be32(bytes, 4, path);
    if (bytes.size() < 8 + n) throw Error(ErrorKind::format, "truncated IDX labels in '" + path + "'");
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<unsigned char>(bytes[8 + i]);
    return labels;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    Dataset ds;
    ds.inputs = load_idx_images(images_path);
    ds.labels = load_idx_labels(labels_path);
    if (ds.labels.size() != ds.inputs.rows()) {
        throw Error(ErrorKind::format, "IDX image/label counts differ");
    }
    ds.num_classes = ds.labels.empty() ? 0 : static_cast<std::size_t>(
                                                 *std::max_element(ds.labels.begin(), ds.labels.end()) + 1);
    return ds;
}

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t count, std::size_t rows, std::size_t cols) {
    if (pixels.size() != count * rows * cols) throw Error(ErrorKind::shape, "IDX pixel count");
    std::string out;
    put_be32(out, kIdxImages);
    put_be32(out, static_cast<std::uint32_t>(count));
    put_be32(out, static_cast<std::uint32_t>(rows));
    put_be32(out, static_cast<std::uint32_t>(cols));
    out.append(pixels.begin(), pixels.end());
    io::write_file(path, out);
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    std::string out;
    put_be32(out, kIdxLabels);
    put_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.append(labels.begin(), labels.end());
    io::write_file(path, out);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

double parse_cell(const std::string& cell, const std::string& path, std::size_t line_no) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(cell, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
        throw Error(ErrorKind::format, "non-numeric cell '" + cell + "' at " + path + ":" +
                                           std::to_string(line_no));
    }
    return v;
}

}  // namespace

Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::format, "empty CSV '" + path + "'");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_commas(line);
    if (header.empty() || header[0] != "label") {
        throw Error(ErrorKind::format, "CSV header must start with 'label' in '" + path + "'");
    }
    const std::size_t dim = header.size() - 1;
    std::vector<double> buf;
    Dataset ds;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_commas(line);
        if (cells.size() != header.size()) {
            throw Error(ErrorKind::format, "ragged row at " + path + ":" + std::to_string(line_no) +
                                               " (" + std::to_string(cells.size()) + " cells, expected " +
                                               std::to_string(header.size()) + ")");
        }
        const double label = parse_cell(cells[0], path, line_no);
        if (label < 0 || label != std::floor(label)) {
            throw Error(ErrorKind::format, "label must be a non-negative integer at " + path + ":" +
                                               std::to_string(line_no));
        }
        ds.labels.push_back(static_cast<int>(label));
        for (std::size_t j = 1; j < cells.size(); ++j) buf.push_back(parse_cell(cells[j], path, line_no));
    }
    ds.inputs = Matrix(ds.labels.size(), dim, std::move(buf));
    ds.num_classes = ds.labels.empty() ? 0 : static_cast<std::size_t>(
                                                 *std::max_element(ds.labels.begin(), ds.labels.end()) + 1);
    return ds;
}

void write_csv(const std::string& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
    out << "label";
    for (std::size_t j = 0; j < ds.dim(); ++j) out << ",f" << j;
    out << "\n";
    out.precision(17);
    for (std::size_t r = 0; r < ds.size(); ++r) {
        out << ds.labels[r];
        for (double v : ds.inputs.row(r)) out << "," << v;
        out << "\n";
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

Dataset load_manifest(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, "bad manifest '" + path + "': " + e.what());
    }
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path fp(p);
        return (fp.is_absolute() ? fp : base / fp).string();
    };
    try {
        const std::string format = j.at("format").get<std::string>();
        const std::size_t num_classes = j.at("num_classes").get<std::size_t>();
        bool any_domain = false;
        Dataset out;
        for (const auto& f : j.at("files")) {
            Dataset part;
            if (format == "csv") {
                part = load_csv(resolve(f.at("path").get<std::string>()));
            } else if (format == "idx") {
                part = load_idx(resolve(f.at("path").get<std::string>()),
                                resolve(f.at("labels").get<std::string>()));
            } else {
                throw Error(ErrorKind::format, "manifest format must be csv or idx");
            }
            if (f.contains("domain")) {
                any_domain = true;
                part.domains.assign(part.size(), f.at("domain").get<int>());
            } else if (any_domain) {
                throw Error(ErrorKind::format, "manifest mixes files with and without domain ids");
            }
            out = concat(out, part);
        }
        out.num_classes = num_classes;
        out.validate();
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::format, "bad manifest '" + path + "': " + e.what());
    }
}

}  // namespace corereft::data
