//! Inputs shared by the criterion benchmarks in `benches/`.

use std::path::PathBuf;

use propvis_core::pipeline::assemble_program;
use propvis_core::{BoundingBox, SceneFixture};

pub fn scripted20() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scripted20")
}

/// Completion with prose around a fenced solution, as models tend to write it.
pub const COMPLETION: &str = "Sure. The solution finds the animals first.\n\
```python\n\
def execute_command(image):\n    \
    image_patch = ImagePatch(image)\n    \
    animal_patches = image_patch.find(\"dog\")\n    \
    if len(animal_patches) == 0:\n        \
        return image_patch.simple_query(\"What animal is on the left?\")\n    \
    names = [\n        \"dog\",\n        \"cat\",\n    ]\n    \
    return animal_patches[0].simple_query(\"What is this?\")\n\
```\n\
This returns the left animal.";

pub const TEST: &str = "def execute_test(image):\n    result = solve_query(image)\n    \
assert isinstance(result, str)\n    assert len(result.split()) in [1, 2]\n    \
assert llm_query(f\"Is {result} an animal?\", long_answer=False) == \"yes\"\n";

pub const SOLUTION: &str = "def execute_command(image):\n    image_patch = ImagePatch(image)\n    \
dogs = image_patch.find(\"dog\")\n    return dogs[0].simple_query(\"What animal is on the left?\")\n";

pub fn program() -> String {
    assemble_program(Some(TEST), SOLUTION).expect("bench program assembles")
}

pub fn fixture() -> SceneFixture {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/corpus_scene.json");
    SceneFixture::load(&path).expect("corpus scene loads")
}

/// Deterministic box pairs spread over a 100 x 100 image.
pub fn box_pairs(n: usize) -> Vec<(BoundingBox, BoundingBox)> {
    (0..n)
        .map(|i| {
            let f = i as f64;
            let l = (f * 7.3) % 60.0;
            let lo = (f * 3.1) % 60.0;
            let a = BoundingBox::new(l, lo, l + 20.0 + f % 15.0, lo + 25.0);
            let b = BoundingBox::new(l + 5.0, lo + (f % 10.0), l + 30.0, lo + 35.0);
            (a, b)
        })
        .collect()
}
