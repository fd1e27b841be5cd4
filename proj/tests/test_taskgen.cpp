#include "covft/error.hpp"
#include "covft/taskgen.hpp"

#include <doctest.h>

#include <map>
#include <set>
#include <sstream>

using namespace covft;

namespace {

// Independent answer oracle: decodes the instruction and reads the grid.
std::vector<int> oracle_answer(const Scene& s, const std::vector<int>& q) {
    const auto kind = static_cast<TaskKind>(q.at(0) - tok::query0);
    std::vector<int> cells;
    for (int c = 0; c < kCells; ++c)
        if (s.grid[c]) cells.push_back(c);
    auto obj_tok = [&](int c) { return tok::object0 + int(s.grid[c]->color) * kShapes + int(s.grid[c]->shape); };
    auto count = [&](auto pred) {
        int n = 0;
        for (int c : cells) n += pred(c) ? 1 : 0;
        return n;
    };
    auto find_obj = [&](int t) {
        for (int c : cells)
            if (obj_tok(c) == t) return c;
        return -1;
    };
    switch (kind) {
    case TaskKind::grounding: {
        const int want = tok::object0 + (q[1] - tok::color0) * kShapes + (q[2] - tok::shape0);
        return {tok::cell0 + find_obj(want)};
    }
    case TaskKind::captioning: {
        std::vector<int> a;
        for (int c : cells) a.push_back(obj_tok(c));
        return a;
    }
    case TaskKind::relation_left: return {find_obj(q[1]) % 4 < find_obj(q[2]) % 4 ? tok::yes : tok::no};
    case TaskKind::relation_above: return {find_obj(q[1]) / 4 < find_obj(q[2]) / 4 ? tok::yes : tok::no};
    case TaskKind::count_color:
        return {tok::count0 + count([&](int c) { return int(s.grid[c]->color) == q[1] - tok::color0; })};
    case TaskKind::count_shape:
        return {tok::count0 + count([&](int c) { return int(s.grid[c]->shape) == q[1] - tok::shape0; })};
    case TaskKind::attribute_color:
        for (int c : cells)
            if (int(s.grid[c]->shape) == q[1] - tok::shape0) return {tok::color0 + int(s.grid[c]->color)};
        return {};
    case TaskKind::existence: return {find_obj(q[1]) >= 0 ? tok::yes : tok::no};
    case TaskKind::object_at: return {obj_tok(q[1] - tok::cell0)};
    case TaskKind::shape_at: return {tok::shape0 + int(s.grid[q[1] - tok::cell0]->shape)};
    case TaskKind::caption_colors: {
        std::vector<int> a;
        for (int c : cells) a.push_back(tok::color0 + int(s.grid[c]->color));
        return a;
    }
    case TaskKind::caption_shapes: {
        std::vector<int> a;
        for (int c : cells) a.push_back(tok::shape0 + int(s.grid[c]->shape));
        return a;
    }
    case TaskKind::ground_all_color: {
        std::vector<int> a;
        for (int c : cells)
            if (int(s.grid[c]->color) == q[1] - tok::color0) a.push_back(tok::cell0 + c);
        return a;
    }
    case TaskKind::count_total: return {tok::count0 + int(cells.size())};
    case TaskKind::exists_color:
        return {count([&](int c) { return int(s.grid[c]->color) == q[1] - tok::color0; }) ? tok::yes : tok::no};
    }
    return {};
}

}  // namespace

TEST_SUITE("taskgen") {
TEST_CASE("render paints one 4x4 block per object") {
    Scene s;
    s.grid[5] = Object{Color::blue, ShapeKind::square};  // row 1, col 1
    const Tensor img = render(s);
    CHECK(img.shape == Shape{16, 16, 3});
    double lit = 0.0;
    for (double v : img.data) lit += v;
    CHECK(lit == 16.0);  // 16 pixels, blue channel only
    CHECK(img.data[(4 * 16 + 4) * 3 + 2] == 1.0);
    CHECK(img.data[(4 * 16 + 4) * 3 + 0] == 0.0);
    CHECK(img.data[(3 * 16 + 4) * 3 + 2] == 0.0);

    Scene t;
    t.grid[0] = Object{Color::yellow, ShapeKind::triangle};
    double tri = 0.0;
    for (double v : render(t).data) tri += v;
    CHECK(tri == 2.0 * 10);  // 10 lower-triangle pixels, two channels
}

TEST_CASE("every kind's answer matches an independent oracle") {
    for (TaskKind kind : all_task_kinds()) {
        Rng rng = make_rng(static_cast<std::uint64_t>(kind) + 100);
        for (int i = 0; i < 200; ++i) {
            const Sample smp = make_sample(kind, rng);
            CAPTURE(task_name(kind));
            REQUIRE(smp.instruction.at(0) == tok::query0 + static_cast<int>(kind));
            CHECK(smp.answer == oracle_answer(smp.scene, smp.instruction));
            CHECK(smp.image.data == render(smp.scene).data);
            for (int t : smp.instruction) CHECK((t >= 0 && t < tok::vocab_size));
        }
    }
}

TEST_CASE("hand-built scene answers") {
    Scene s;
    s.grid[0] = Object{Color::red, ShapeKind::circle};
    s.grid[6] = Object{Color::red, ShapeKind::square};
    s.grid[15] = Object{Color::green, ShapeKind::circle};
    Rng rng = make_rng(1);
    auto cap = make_sample_for_scene(TaskKind::captioning, s, rng);
    REQUIRE(cap);
    CHECK(cap->answer == std::vector<int>{tok::object(Color::red, ShapeKind::circle),
                                          tok::object(Color::red, ShapeKind::square),
                                          tok::object(Color::green, ShapeKind::circle)});
    auto total = make_sample_for_scene(TaskKind::count_total, s, rng);
    CHECK(total->answer == std::vector<int>{tok::count(3)});
    // Two circles: attribute_color needs a shape that occurs once, only the square qualifies.
    auto attr = make_sample_for_scene(TaskKind::attribute_color, s, rng);
    REQUIRE(attr);
    CHECK(attr->instruction[1] == tok::shape(ShapeKind::square));
    CHECK(attr->answer == std::vector<int>{tok::color(Color::red)});

    Scene one;
    one.grid[3] = Object{Color::blue, ShapeKind::square};
    CHECK_FALSE(make_sample_for_scene(TaskKind::relation_left, one, rng));
    CHECK_FALSE(make_sample_for_scene(TaskKind::captioning, Scene{}, rng));
}

TEST_CASE("datasets are deterministic, balanced and nest by fraction") {
    const auto kinds = diversity_kinds(6);
    const Dataset a = build_dataset(kinds, 120, 1.0, 7);
    const Dataset b = build_dataset(kinds, 120, 1.0, 7);
    REQUIRE(a.size() == 120);
    std::map<TaskKind, int> per;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].answer == b[i].answer);
        CHECK(a[i].scene == b[i].scene);
        ++per[a[i].task_kind];
    }
    for (TaskKind k : kinds) CHECK(per[k] == 20);
    const Dataset q = build_dataset(kinds, 120, 0.25, 7);
    REQUIRE(q.size() == 30);
    for (std::size_t i = 0; i < q.size(); ++i) CHECK(q[i].seed == a[i].seed);
    CHECK_THROWS_AS(build_dataset(kinds, 10, 0.1, 7), InputError);
    CHECK_THROWS_AS(build_dataset({}, 10, 1.0, 7), InputError);
}

TEST_CASE("diversity levels are prefixes of the registry") {
    CHECK(diversity_kinds(3) == std::vector<TaskKind>{TaskKind::grounding, TaskKind::captioning,
                                                      TaskKind::relation_left});
    CHECK(diversity_kinds(15).size() == 15);
    CHECK_THROWS(diversity_kinds(0));
    CHECK_THROWS(diversity_kinds(16));
    CHECK(parse_task_kind("shape_at") == TaskKind::shape_at);
    CHECK_THROWS_AS(parse_task_kind("nope"), InputError);
}

TEST_CASE("JSONL round trip re-renders images") {
    const Dataset a = build_dataset(all_task_kinds(), 45, 1.0, 3);
    std::stringstream ss;
    write_dataset_jsonl(a, ss);
    const Dataset b = read_dataset_jsonl(ss);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(b[i].scene == a[i].scene);
        CHECK(b[i].instruction == a[i].instruction);
        CHECK(b[i].answer == a[i].answer);
        CHECK(b[i].task_kind == a[i].task_kind);
        CHECK(b[i].seed == a[i].seed);
        CHECK(b[i].image.data == a[i].image.data);
    }
    std::stringstream bad("{\"scene\": 3}\n");
    CHECK_THROWS_AS(read_dataset_jsonl(bad), InputError);
}

TEST_CASE("pretrain pairs caption their scene") {
    const Dataset p = pretrain_pairs(20, 9);
    for (const auto& s : p) {
        CHECK(s.instruction.empty());
        CHECK(s.answer == caption_tokens(s.scene));
        CHECK(s.scene.object_count() >= 2);
    }
}
}
