#include "covft/taskgen.hpp"

#include "covft/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

namespace covft {

namespace {

constexpr std::array<std::string_view, kTaskKinds> kTaskNames = {
    "grounding",      "captioning",       "relation_left", "count_color", "attribute_color",
    "existence",      "object_at",        "count_shape",   "relation_above", "caption_colors",
    "ground_all_color", "count_total",    "shape_at",      "exists_color", "caption_shapes",
};

constexpr std::array<std::array<double, 3>, kColors> kRgb = {{
    {1.0, 0.0, 0.0},
    {0.0, 1.0, 0.0},
    {0.0, 0.0, 1.0},
    {1.0, 1.0, 0.0},
}};

bool shape_pixel(ShapeKind s, int i, int j) {
    switch (s) {
    case ShapeKind::square: return true;
    case ShapeKind::circle: return !((i == 0 || i == 3) && (j == 0 || j == 3));
    case ShapeKind::triangle: return j <= i;
    }
    return false;
}

int query_token(TaskKind k) { return tok::query0 + static_cast<int>(k); }

Color random_color(Rng& rng) { return static_cast<Color>(uniform_index(rng, kColors)); }
ShapeKind random_shape(Rng& rng) { return static_cast<ShapeKind>(uniform_index(rng, kShapes)); }

int object_token(const Object& o) { return tok::object(o.color, o.shape); }

/// Cells holding an object that appears exactly once in the scene.
std::vector<int> unique_object_cells(const Scene& s) {
    std::map<int, int> counts;
    for (int c : s.occupied()) ++counts[object_token(*s.grid[c])];
    std::vector<int> out;
    for (int c : s.occupied())
        if (counts[object_token(*s.grid[c])] == 1) out.push_back(c);
    return out;
}

int count_if_cells(const Scene& s, auto pred) {
    int n = 0;
    for (int c : s.occupied())
        if (pred(*s.grid[c])) ++n;
    return n;
}

}  // namespace

std::size_t Scene::object_count() const {
    return static_cast<std::size_t>(std::count_if(grid.begin(), grid.end(), [](const auto& o) { return o.has_value(); }));
}

std::vector<int> Scene::occupied() const {
    std::vector<int> out;
    for (int c = 0; c < kCells; ++c)
        if (grid[c]) out.push_back(c);
    return out;
}

void Scene::validate() const {
    if (object_count() == 0) throw InputError("scene has no objects");
}

std::string_view task_name(TaskKind kind) { return kTaskNames.at(static_cast<std::size_t>(kind)); }

TaskKind parse_task_kind(std::string_view name) {
    for (std::size_t i = 0; i < kTaskNames.size(); ++i)
        if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
    throw InputError("unknown task kind '" + std::string(name) + "'");
}

const std::array<TaskKind, kTaskKinds>& all_task_kinds() {
    static const std::array<TaskKind, kTaskKinds> kinds = [] {
        std::array<TaskKind, kTaskKinds> k{};
        for (int i = 0; i < kTaskKinds; ++i) k[static_cast<std::size_t>(i)] = static_cast<TaskKind>(i);
        return k;
    }();
    return kinds;
}

std::vector<TaskKind> diversity_kinds(std::size_t level) {
    if (level == 0 || level > static_cast<std::size_t>(kTaskKinds))
        throw ConfigError("diversity level must be in 1..15", "data.diversity");
    const auto& all = all_task_kinds();
    return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(level)};
}

Scene random_scene(Rng& rng, int min_objects, int max_objects) {
    if (min_objects < 1 || max_objects > kCells || min_objects > max_objects)
        throw ContractError("random_scene: bad object range");
    const int n = min_objects + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(max_objects - min_objects + 1)));
    std::array<int, kCells> cells{};
    std::iota(cells.begin(), cells.end(), 0);
    for (int i = 0; i < n; ++i)
        std::swap(cells[static_cast<std::size_t>(i)],
                  cells[static_cast<std::size_t>(i) + uniform_index(rng, static_cast<std::size_t>(kCells - i))]);
    Scene s;
    for (int i = 0; i < n; ++i) {
        const Color col = random_color(rng);
        const ShapeKind shp = random_shape(rng);
        s.grid[static_cast<std::size_t>(cells[static_cast<std::size_t>(i)])] = Object{col, shp};
    }
    return s;
}

Tensor render(const Scene& scene) {
    Tensor img({kImageSide, kImageSide, 3});
    for (int c : scene.occupied()) {
        const Object& o = *scene.grid[static_cast<std::size_t>(c)];
        const int r0 = (c / kGridSide) * kCellPixels;
        const int c0 = (c % kGridSide) * kCellPixels;
        const auto& rgb = kRgb[static_cast<std::size_t>(o.color)];
        for (int i = 0; i < kCellPixels; ++i)
            for (int j = 0; j < kCellPixels; ++j) {
                if (!shape_pixel(o.shape, i, j)) continue;
                const std::size_t base = (static_cast<std::size_t>(r0 + i) * kImageSide + static_cast<std::size_t>(c0 + j)) * 3;
                for (int ch = 0; ch < 3; ++ch) img.data[base + static_cast<std::size_t>(ch)] = rgb[static_cast<std::size_t>(ch)];
            }
    }
    return img;
}

std::vector<int> caption_tokens(const Scene& scene) {
    std::vector<int> out;
    for (int c : scene.occupied()) out.push_back(object_token(*scene.grid[static_cast<std::size_t>(c)]));
    return out;
}

std::optional<Sample> make_sample_for_scene(TaskKind kind, const Scene& s, Rng& rng) {
    Sample smp;
    smp.task_kind = kind;
    smp.scene = s;
    auto& q = smp.instruction;
    auto& a = smp.answer;
    q.push_back(query_token(kind));
    const auto occ = s.occupied();
    if (occ.empty()) return std::nullopt;
    auto obj_at = [&](int c) { return *s.grid[static_cast<std::size_t>(c)]; };

    switch (kind) {
    case TaskKind::grounding: {
        const auto uniq = unique_object_cells(s);
        if (uniq.empty()) return std::nullopt;
        const int c = uniq[uniform_index(rng, uniq.size())];
        q.push_back(tok::color(obj_at(c).color));
        q.push_back(tok::shape(obj_at(c).shape));
        a.push_back(tok::cell0 + c);
        break;
    }
    case TaskKind::captioning: a = caption_tokens(s); break;
    case TaskKind::relation_left:
    case TaskKind::relation_above: {
        const auto uniq = unique_object_cells(s);
        if (uniq.size() < 2) return std::nullopt;
        const std::size_t i = uniform_index(rng, uniq.size());
        std::size_t j = uniform_index(rng, uniq.size() - 1);
        if (j >= i) ++j;
        const int ca = uniq[i], cb = uniq[j];
        q.push_back(object_token(obj_at(ca)));
        q.push_back(object_token(obj_at(cb)));
        const bool holds = kind == TaskKind::relation_left ? (ca % kGridSide) < (cb % kGridSide)
                                                           : (ca / kGridSide) < (cb / kGridSide);
        a.push_back(holds ? tok::yes : tok::no);
        break;
    }
    case TaskKind::count_color: {
        const Color col = random_color(rng);
        q.push_back(tok::color(col));
        a.push_back(tok::count(count_if_cells(s, [&](const Object& o) { return o.color == col; })));
        break;
    }
    case TaskKind::count_shape: {
        const ShapeKind shp = random_shape(rng);
        q.push_back(tok::shape(shp));
        a.push_back(tok::count(count_if_cells(s, [&](const Object& o) { return o.shape == shp; })));
        break;
    }
    case TaskKind::attribute_color: {
        std::vector<int> cand;
        for (int c : occ) {
            const ShapeKind shp = obj_at(c).shape;
            if (count_if_cells(s, [&](const Object& o) { return o.shape == shp; }) == 1) cand.push_back(c);
        }
        if (cand.empty()) return std::nullopt;
        const int c = cand[uniform_index(rng, cand.size())];
        q.push_back(tok::shape(obj_at(c).shape));
        a.push_back(tok::color(obj_at(c).color));
        break;
    }
    case TaskKind::existence: {
        Object target{random_color(rng), random_shape(rng)};
        if (uniform(rng) < 0.5) target = obj_at(occ[uniform_index(rng, occ.size())]);
        q.push_back(object_token(target));
        const bool present = count_if_cells(s, [&](const Object& o) { return o == target; }) > 0;
        a.push_back(present ? tok::yes : tok::no);
        break;
    }
    case TaskKind::object_at: {
        const int c = occ[uniform_index(rng, occ.size())];
        q.push_back(tok::cell0 + c);
        a.push_back(object_token(obj_at(c)));
        break;
    }
    case TaskKind::shape_at: {
        const int c = occ[uniform_index(rng, occ.size())];
        q.push_back(tok::cell0 + c);
        a.push_back(tok::shape(obj_at(c).shape));
        break;
    }
    case TaskKind::caption_colors:
        for (int c : occ) a.push_back(tok::color(obj_at(c).color));
        break;
    case TaskKind::caption_shapes:
        for (int c : occ) a.push_back(tok::shape(obj_at(c).shape));
        break;
    case TaskKind::ground_all_color: {
        const Color col = obj_at(occ[uniform_index(rng, occ.size())]).color;
        q.push_back(tok::color(col));
        for (int c : occ)
            if (obj_at(c).color == col) a.push_back(tok::cell0 + c);
        break;
    }
    case TaskKind::count_total: a.push_back(tok::count(static_cast<int>(occ.size()))); break;
    case TaskKind::exists_color: {
        const Color col = random_color(rng);
        q.push_back(tok::color(col));
        a.push_back(count_if_cells(s, [&](const Object& o) { return o.color == col; }) > 0 ? tok::yes : tok::no);
        break;
    }
    }
    smp.image = render(s);
    return smp;
}

Sample make_sample(TaskKind kind, Rng& rng) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        const std::uint64_t scene_seed = rng();
        Rng scene_rng = make_rng(scene_seed);
        Scene s = random_scene(scene_rng);
        if (auto smp = make_sample_for_scene(kind, s, rng)) {
            smp->scene_id = scene_seed;
            return std::move(*smp);
        }
    }
    throw Error("make_sample: no answerable scene for " + std::string(task_name(kind)));
}

Dataset build_dataset(std::span<const TaskKind> kinds, std::size_t n, double fraction, std::uint64_t seed) {
    if (kinds.empty()) throw InputError("build_dataset: no task kinds");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InputError("build_dataset: fraction must lie in (0, 1]");
    const auto keep = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
    if (keep < kinds.size())
        throw InputError("build_dataset: n*fraction = " + std::to_string(keep) + " is smaller than the " +
                         std::to_string(kinds.size()) + " requested kinds");
    Dataset all(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t sseed = derive_seed(seed, i);
        Rng rng = make_rng(sseed);
        all[i] = make_sample(kinds[i % kinds.size()], rng);
        all[i].seed = sseed;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(derive_seed(seed, "shuffle"));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle_rng, i)]);
    Dataset out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(std::move(all[order[i]]));
    return out;
}

Dataset pretrain_pairs(std::size_t n, std::uint64_t seed) {
    Dataset out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t sseed = derive_seed(seed, i);
        Rng rng = make_rng(sseed);
        Sample& s = out[i];
        s.scene = random_scene(rng);
        s.scene_id = sseed;
        s.seed = sseed;
        s.task_kind = TaskKind::captioning;
        s.answer = caption_tokens(s.scene);
        s.image = render(s.scene);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json cells = nlohmann::json::array();
    for (int c : s.occupied()) {
        const Object& o = *s.grid[static_cast<std::size_t>(c)];
        cells.push_back({c, static_cast<int>(o.color), static_cast<int>(o.shape)});
    }
    return cells;
}

Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    for (const auto& e : j) {
        const int c = e.at(0).get<int>();
        const int col = e.at(1).get<int>();
        const int shp = e.at(2).get<int>();
        if (c < 0 || c >= kCells || col < 0 || col >= kColors || shp < 0 || shp >= kShapes)
            throw InputError("scene entry out of range: " + e.dump());
        if (s.grid[static_cast<std::size_t>(c)]) throw InputError("two objects share cell " + std::to_string(c));
        s.grid[static_cast<std::size_t>(c)] = Object{static_cast<Color>(col), static_cast<ShapeKind>(shp)};
    }
    s.validate();
    return s;
}

void check_tokens(const std::vector<int>& t) {
    for (int v : t)
        if (v < 0 || v >= tok::vocab_size) throw InputError("token id " + std::to_string(v) + " outside vocabulary");
}

}  // namespace

void write_dataset_jsonl(const Dataset& data, std::ostream& os) {
    for (const Sample& s : data) {
        nlohmann::json j;
        j["scene"] = scene_to_json(s.scene);
        j["instruction_tokens"] = s.instruction;
        j["answer_tokens"] = s.answer;
        j["task_kind"] = task_name(s.task_kind);
        j["seed"] = s.seed;
        j["scene_id"] = s.scene_id;
        os << j.dump() << '\n';
    }
}

void write_dataset_jsonl(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write " + path.string());
    write_dataset_jsonl(data, os);
}

Dataset read_dataset_jsonl(std::istream& is) {
    Dataset out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Sample s;
            s.scene = scene_from_json(j.at("scene"));
            s.instruction = j.at("instruction_tokens").get<std::vector<int>>();
            s.answer = j.at("answer_tokens").get<std::vector<int>>();
            check_tokens(s.instruction);
            check_tokens(s.answer);
            s.task_kind = parse_task_kind(j.at("task_kind").get<std::string>());
            s.seed = j.value("seed", std::uint64_t{0});
            s.scene_id = j.value("scene_id", std::uint64_t{0});
            s.image = render(s.scene);
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

Dataset read_dataset_jsonl(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot read " + path.string());
    return read_dataset_jsonl(is);
}

}  // namespace covft
