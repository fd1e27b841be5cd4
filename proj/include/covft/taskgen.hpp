#pragma once

// Synthetic multimodal instruction data over 4x4 grid scenes.
//
// Every scene cell maps to exactly one 4x4 image patch, so "local" tasks
// (grounding, object_at, ...) read one patch while "global" tasks
// (captioning, counting, ...) read all of them over the same images.

#include "covft/rng.hpp"
#include "covft/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace covft {

inline constexpr int kGridSide = 4;
inline constexpr int kCells = kGridSide * kGridSide;
inline constexpr int kCellPixels = 4;
inline constexpr int kImageSide = kGridSide * kCellPixels;
inline constexpr int kColors = 4;
inline constexpr int kShapes = 3;
inline constexpr int kMaxObjects = 6;

enum class Color : std::uint8_t { red, green, blue, yellow };
enum class ShapeKind : std::uint8_t { square, circle, triangle };

/// Shared 64-token vocabulary.
namespace tok {
inline constexpr int cls = 0;  // summary token, prepended by the text encoder
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int pad = 3;
inline constexpr int cell0 = 4;    // 16 cell tokens
inline constexpr int color0 = 20;  // 4 colors
inline constexpr int shape0 = 24;  // 3 shapes
inline constexpr int object0 = 27; // 12 (color, shape) objects
inline constexpr int count0 = 39;  // counts 0..6
inline constexpr int yes = 46;
inline constexpr int no = 47;
inline constexpr int query0 = 48;  // one query word per task kind
inline constexpr int vocab_size = 64;

constexpr int cell(int r, int c) { return cell0 + r * kGridSide + c; }
constexpr int color(Color c) { return color0 + static_cast<int>(c); }
constexpr int shape(ShapeKind s) { return shape0 + static_cast<int>(s); }
constexpr int object(Color c, ShapeKind s) { return object0 + static_cast<int>(c) * kShapes + static_cast<int>(s); }
constexpr int count(int n) { return count0 + n; }
}  // namespace tok

struct Object {
    Color color;
    ShapeKind shape;
    bool operator==(const Object&) const = default;
};

struct Scene {
    std::array<std::optional<Object>, kCells> grid{};

    std::size_t object_count() const;
    /// Raster-order list of occupied cell indices.
    std::vector<int> occupied() const;
    /// Throws InputError when empty.
    void validate() const;
    bool operator==(const Scene&) const = default;
};

enum class TaskKind : std::uint8_t {
    grounding,         // where is <color> <shape>            -> cell
    captioning,        // describe                            -> objects in raster order
    relation_left,     // is <obj a> left of <obj b>          -> yes/no
    count_color,       // how many <color>                    -> count
    attribute_color,   // what color is the <shape>           -> color
    existence,         // is there a <obj>                    -> yes/no
    object_at,         // what is at <cell>                   -> object
    count_shape,       // how many <shape>                    -> count
    relation_above,    // is <obj a> above <obj b>            -> yes/no
    caption_colors,    // list colors                         -> colors in raster order
    ground_all_color,  // where are the <color> things        -> cells in raster order
    count_total,       // how many objects                    -> count
    shape_at,          // what shape is at <cell>             -> shape
    exists_color,      // is anything <color>                 -> yes/no
    caption_shapes,    // list shapes                         -> shapes in raster order
};
inline constexpr int kTaskKinds = 15;

std::string_view task_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);
const std::array<TaskKind, kTaskKinds>& all_task_kinds();
/// The first `level` kinds of the registry; diversity levels 3, 6, 9, 12, 15.
std::vector<TaskKind> diversity_kinds(std::size_t level);

struct Sample {
    Tensor image;  // [16, 16, 3]
    std::vector<int> instruction;
    std::vector<int> answer;
    TaskKind task_kind = TaskKind::grounding;
    Scene scene;
    std::uint64_t scene_id = 0;
    std::uint64_t seed = 0;
};

using Dataset = std::vector<Sample>;

Scene random_scene(Rng& rng, int min_objects = 2, int max_objects = kMaxObjects);
/// Paints each occupied cell as a 4x4 block; background is 0.
Tensor render(const Scene& scene);

/// Raster-order object tokens; also the stage-1 caption.
std::vector<int> caption_tokens(const Scene& scene);

/// Draws a sample of `kind`; regenerates the scene internally until the kind is answerable.
Sample make_sample(TaskKind kind, Rng& rng);
/// Same, for a fixed scene. Returns nullopt when the kind is unanswerable on it.
std::optional<Sample> make_sample_for_scene(TaskKind kind, const Scene& scene, Rng& rng);

/// Round-robin over `kinds` with per-index seeds, then a seeded shuffle; the
/// fraction keeps a prefix so smaller fractions nest in larger ones.
Dataset build_dataset(std::span<const TaskKind> kinds, std::size_t n, double fraction, std::uint64_t seed);
/// Stage-1 image/caption pairs: empty instruction, caption answer.
Dataset pretrain_pairs(std::size_t n, std::uint64_t seed);

// JSONL: {scene, instruction_tokens, answer_tokens, task_kind, seed, scene_id}.
// Images are re-rendered from the scene on load.
void write_dataset_jsonl(const Dataset& data, std::ostream& os);
void write_dataset_jsonl(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset_jsonl(std::istream& is);
Dataset read_dataset_jsonl(const std::filesystem::path& path);

}  // namespace covft
