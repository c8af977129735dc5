//! Question templates and analytic answers.
//!
//! Five templates over three families. The referenced object is named by its
//! color (colors are unique per scene); distance ties break by ascending
//! object index.

use hvqa_core::rng::{self, ChaCha8Rng};

use crate::scene::{Scene, Shape};
use crate::vocab::{answer_id, color_word};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum QuestionFamily {
    NonRelational = 0,
    Relational = 1,
    Count = 2,
}

impl QuestionFamily {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(QuestionFamily::NonRelational),
            1 => Some(QuestionFamily::Relational),
            2 => Some(QuestionFamily::Count),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuestionFamily::NonRelational => "non-relational",
            QuestionFamily::Relational => "relational",
            QuestionFamily::Count => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qa {
    pub tokens: Vec<u16>,
    pub answer: u16,
    pub family: QuestionFamily,
}

fn shape_answer(shape: Shape) -> u16 {
    match shape {
        Shape::Square => answer_id("square").unwrap(),
        Shape::Circle => answer_id("circle").unwrap(),
    }
}

fn dist2(scene: &Scene, a: usize, b: usize) -> i64 {
    let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
    let dx = oa.cx as i64 - ob.cx as i64;
    let dy = oa.cy as i64 - ob.cy as i64;
    dx * dx + dy * dy
}

/// Index of the object nearest to `reference` (excluding itself), ties by
/// ascending index.
pub fn closest_to(scene: &Scene, reference: usize) -> usize {
    let mut best = None;
    for i in 0..scene.objects.len() {
        if i == reference {
            continue;
        }
        let d = dist2(scene, reference, i);
        match best {
            None => best = Some((i, d)),
            Some((_, bd)) if d < bd => best = Some((i, d)),
            _ => {}
        }
    }
    best.expect("scene has more than one object").0
}

/// Index of the object farthest from `reference`, ties by ascending index.
pub fn farthest_from(scene: &Scene, reference: usize) -> usize {
    let mut best = None;
    for i in 0..scene.objects.len() {
        if i == reference {
            continue;
        }
        let d = dist2(scene, reference, i);
        match best {
            None => best = Some((i, d)),
            Some((_, bd)) if d > bd => best = Some((i, d)),
            _ => {}
        }
    }
    best.expect("scene has more than one object").0
}

/// Objects sharing the reference's shape, the reference included.
pub fn same_shape_count(scene: &Scene, reference: usize) -> usize {
    let shape = scene.objects[reference].shape;
    scene.objects.iter().filter(|o| o.shape == shape).count()
}

/// The object is "on the left" when its normalized center x is below 0.5.
pub fn on_left(scene: &Scene, reference: usize) -> bool {
    scene.objects[reference].center().0 < 0.5
}

/// Samples one of the five templates and computes the answer from scene
/// geometry.
pub fn make_qa(scene: &Scene, seed: u64) -> Qa {
    let mut rng = rng::stream_rng(seed, 1);
    make_qa_with(scene, &mut rng)
}

pub fn make_qa_with(scene: &Scene, rng: &mut ChaCha8Rng) -> Qa {
    let template = rng::below(rng, 5);
    let reference = rng::below(rng, scene.objects.len());
    let color = color_word(scene.objects[reference].color);
    // word ids (see vocab::WORDS)
    let (w_what, w_shape, w_is, w_the, w_object) = (0u16, 1, 2, 3, 10);
    let (w_on, w_left, w_closest, w_to, w_farthest, w_from) = (11u16, 12, 13, 14, 15, 16);
    let (w_how, w_many, w_objects, w_have, w_same, w_as) = (17u16, 18, 19, 20, 21, 22);
    match template {
        0 => Qa {
            tokens: vec![w_what, w_shape, w_is, w_the, color, w_object],
            answer: shape_answer(scene.objects[reference].shape),
            family: QuestionFamily::NonRelational,
        },
        1 => Qa {
            tokens: vec![w_is, w_the, color, w_object, w_on, w_the, w_left],
            answer: if on_left(scene, reference) {
                answer_id("yes").unwrap()
            } else {
                answer_id("no").unwrap()
            },
            family: QuestionFamily::NonRelational,
        },
        2 => Qa {
            tokens: vec![
                w_what, w_shape, w_is, w_the, w_object, w_closest, w_to, w_the, color, w_object,
            ],
            answer: shape_answer(scene.objects[closest_to(scene, reference)].shape),
            family: QuestionFamily::Relational,
        },
        3 => Qa {
            tokens: vec![
                w_what, w_shape, w_is, w_the, w_object, w_farthest, w_from, w_the, color, w_object,
            ],
            answer: shape_answer(scene.objects[farthest_from(scene, reference)].shape),
            family: QuestionFamily::Relational,
        },
        _ => Qa {
            tokens: vec![
                w_how, w_many, w_objects, w_have, w_the, w_same, w_shape, w_as, w_the, color,
                w_object,
            ],
            answer: answer_id(&same_shape_count(scene, reference).to_string()).unwrap(),
            family: QuestionFamily::Count,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneObject};
    use crate::vocab::{decode_question, MAX_QUESTION_LEN};

    fn two_object_scene(x0: usize, x1: usize) -> Scene {
        Scene {
            objects: vec![
                SceneObject { shape: Shape::Square, color: 0, cx: x0, cy: 32, size: 8 },
                SceneObject { shape: Shape::Circle, color: 1, cx: x1, cy: 32, size: 8 },
            ],
        }
    }

    #[test]
    fn mirrored_positions_flip_left_answer() {
        let scene = two_object_scene(10, 53); // 53 ≈ 63 − 10, mirrored
        assert!(on_left(&scene, 0));
        assert!(!on_left(&scene, 1));
    }

    #[test]
    fn all_same_shape_counts_six() {
        let mut scene = generate_scene(3).unwrap();
        for obj in &mut scene.objects {
            obj.shape = Shape::Square;
        }
        assert_eq!(same_shape_count(&scene, 2), 6);
    }

    #[test]
    fn distance_ties_break_by_ascending_index() {
        // objects 1 and 2 are equidistant from 0
        let scene = Scene {
            objects: vec![
                SceneObject { shape: Shape::Square, color: 0, cx: 32, cy: 32, size: 8 },
                SceneObject { shape: Shape::Circle, color: 1, cx: 16, cy: 32, size: 8 },
                SceneObject { shape: Shape::Square, color: 2, cx: 48, cy: 32, size: 8 },
            ],
        };
        assert_eq!(closest_to(&scene, 0), 1);
        assert_eq!(farthest_from(&scene, 0), 1);
    }

    #[test]
    fn questions_fit_length_budget() {
        for seed in 0..200 {
            let scene = generate_scene(seed).unwrap();
            let qa = make_qa(&scene, seed ^ 0xabcd);
            assert!(qa.tokens.len() <= MAX_QUESTION_LEN, "{}", decode_question(&qa.tokens));
            assert!(qa.answer < 16);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let scene = generate_scene(5).unwrap();
        assert_eq!(make_qa(&scene, 9), make_qa(&scene, 9));
    }
}
