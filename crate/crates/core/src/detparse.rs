//! Free-form VLM response parsing into unit-normalized boxes.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Any coordinate above this marks a tuple as pixel-scale.
pub const PIXEL_SCALE_THRESHOLD: f64 = 1.5;

/// One model answer for an (image, category) query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub image_id: u64,
    pub category: String,
    pub width: f64,
    pub height: f64,
    pub response_text: String,
}

/// `[x1, y1, x2, y2]` in unit coordinates with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl NormalizedBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if [x1, y1, x2, y2].into_iter().all(unit) && x1 < x2 && y1 < y2 {
            Some(Self { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Formats in the bracket syntax the prompt asks for.
impl fmt::Display for NormalizedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Boxes recovered from one response plus the number of 4-tuples that were
/// found but rejected during standardization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseOutcome {
    pub boxes: Vec<NormalizedBox>,
    pub rejected: usize,
}

fn tuple_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*";
        Regex::new(&format!(r"\[{num},{num},{num},{num}\]")).expect("valid tuple regex")
    })
}

/// Pixel-to-unit conversion, clamp, then reject degenerate boxes.
pub fn standardize_box(raw: [f64; 4], width: f64, height: f64) -> Option<NormalizedBox> {
    if !raw.iter().all(|v| v.is_finite()) || width <= 0.0 || height <= 0.0 {
        return None;
    }
    let [mut x1, mut y1, mut x2, mut y2] = raw;
    if raw.iter().any(|&v| v > PIXEL_SCALE_THRESHOLD) {
        x1 /= width;
        x2 /= width;
        y1 /= height;
        y2 /= height;
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    NormalizedBox::new(clamp(x1), clamp(y1), clamp(x2), clamp(y2))
}

pub fn parse_response_detailed(resp: &RawResponse) -> ParseOutcome {
    let mut outcome = ParseOutcome::default();
    for caps in tuple_regex().captures_iter(&resp.response_text) {
        let mut raw = [0.0; 4];
        let mut ok = true;
        for (slot, group) in raw.iter_mut().zip(1..=4) {
            match caps[group].parse::<f64>() {
                Ok(v) => *slot = v,
                Err(_) => ok = false,
            }
        }
        match ok
            .then(|| standardize_box(raw, resp.width, resp.height))
            .flatten()
        {
            Some(b) => outcome.boxes.push(b),
            None => outcome.rejected += 1,
        }
    }
    if outcome.rejected > 0 {
        log::warn!(
            "image {} / {}: dropped {} degenerate box(es)",
            resp.image_id,
            resp.category,
            outcome.rejected
        );
    }
    outcome
}

/// Every bracketed numeric 4-tuple in the text, in order of appearance.
pub fn parse_response(resp: &RawResponse) -> Vec<NormalizedBox> {
    parse_response_detailed(resp).boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(text: &str, w: f64, h: f64) -> RawResponse {
        RawResponse {
            image_id: 1,
            category: "giraffe".into(),
            width: w,
            height: h,
            response_text: text.into(),
        }
    }

    fn coords(boxes: &[NormalizedBox]) -> Vec<[f64; 4]> {
        boxes.iter().map(|b| b.coords()).collect()
    }

    #[test]
    fn single_normalized_box() {
        let boxes = parse_response(&resp("[0.1, 0.2, 0.5, 0.6]", 640.0, 480.0));
        assert_eq!(coords(&boxes), vec![[0.1, 0.2, 0.5, 0.6]]);
    }

    #[test]
    fn multiple_boxes_in_order() {
        let text = "Found two: [0.1,0.2,0.3,0.4] and [0.5,0.5,0.9,0.9].";
        let boxes = parse_response(&resp(text, 640.0, 480.0));
        assert_eq!(coords(&boxes), vec![[0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.9, 0.9]]);
    }

    #[test]
    fn pixel_box_is_rescaled() {
        let boxes = parse_response(&resp("[120, 50, 400, 300]", 800.0, 600.0));
        let [x1, y1, x2, y2] = boxes[0].coords();
        assert_eq!((x1, x2, y2), (0.15, 0.5, 0.5));
        assert!((y1 - 50.0 / 600.0).abs() < 1e-15);
        assert!((y1 - 0.08333).abs() < 1e-5);
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(
            standardize_box([0.2, 0.2, 0.8, 0.9], 10.0, 10.0).unwrap().coords(),
            [0.2, 0.2, 0.8, 0.9]
        );
        assert_eq!(standardize_box([0.5, 0.5, 0.4, 0.9], 10.0, 10.0), None);
        assert_eq!(
            standardize_box([-0.1, 0.0, 0.5, 1.2], 10.0, 10.0).unwrap().coords(),
            [0.0, 0.0, 0.5, 1.0]
        );
        // 1.2 stays below the pixel threshold
        assert_eq!(
            standardize_box([0.0, 0.0, 1.2, 1.02], 800.0, 600.0).unwrap().coords(),
            [0.0, 0.0, 1.0, 1.0]
        );
        // clamping can collapse a box
        assert_eq!(standardize_box([-0.5, 0.1, -0.1, 0.4], 10.0, 10.0), None);
        assert_eq!(standardize_box([0.1, 0.1, 0.2, 0.2], 0.0, 10.0), None);
    }

    #[test]
    fn lenient_on_malformed_brackets() {
        let text = "[0.1, 0.2, 0.3] [a, b, c, d] [0.1, 0.2, 0.3, 0.4, 0.5] [] no boxes";
        let out = parse_response_detailed(&resp(text, 100.0, 100.0));
        assert!(out.boxes.is_empty());
        assert_eq!(out.rejected, 0);

        let out = parse_response_detailed(&resp("[0.5, 0.5, 0.4, 0.9] [0.1,0.1,0.2,0.2]", 1.0, 1.0));
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.rejected, 1);
    }

    #[test]
    fn whitespace_and_integer_notation() {
        let a = parse_response(&resp("[ 0 ,0.25,\n1 , 1.0 ]", 10.0, 10.0));
        let b = parse_response(&resp("[0.0,0.25,1.0,1]", 10.0, 10.0));
        assert_eq!(a, b);
        assert_eq!(coords(&a), vec![[0.0, 0.25, 1.0, 1.0]]);
        let c = parse_response(&resp("[1e-1, 2E-1, .5, 6e-1]", 10.0, 10.0));
        assert_eq!(coords(&c), vec![[0.1, 0.2, 0.5, 0.6]]);
    }

    proptest! {
        #[test]
        fn round_trip_through_bracket_syntax(x1 in 0.0f64..0.5, y1 in 0.0f64..0.5,
                                             w in 0.01f64..0.5, h in 0.01f64..0.5) {
            let b = NormalizedBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            let parsed = parse_response(&resp(&format!("box: {b}"), 640.0, 480.0));
            prop_assert_eq!(parsed.len(), 1);
            for (p, q) in parsed[0].coords().iter().zip(b.coords()) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }

        #[test]
        fn emitted_boxes_are_valid(prefix in "[a-z ,.\\[\\]0-9]{0,30}",
                                   nums in proptest::collection::vec(-100.0f64..2000.0, 4),
                                   suffix in "[a-z ,.\\]0-9]{0,30}",
                                   w in 1.0f64..2000.0, h in 1.0f64..2000.0) {
            let text = format!("{prefix}[{}, {}, {}, {}]{suffix}", nums[0], nums[1], nums[2], nums[3]);
            for b in parse_response(&resp(&text, w, h)) {
                let [x1, y1, x2, y2] = b.coords();
                prop_assert!(0.0 <= x1 && x1 < x2 && x2 <= 1.0);
                prop_assert!(0.0 <= y1 && y1 < y2 && y2 <= 1.0);
            }
        }
    }
}
