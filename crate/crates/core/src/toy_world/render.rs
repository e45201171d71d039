//! Styled-shape rendering.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

pub const IMAGE_SIZE: usize = 24;
pub const STYLES: usize = 4;
pub const CONTENTS: usize = 4;

/// Nominal shape centre and radius before jitter.
pub const CENTER: f64 = 12.0;
pub const RADIUS: f64 = 7.0;
pub const CENTER_JITTER: f64 = 2.0;
pub const RADIUS_JITTER: f64 = 0.1;

const BACKGROUND: f64 = 0.92;
const TINT_JITTER: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleSpec {
    pub id: usize,
    pub pattern: Pattern,
    pub palette: [[f32; 3]; 2],
}

pub const STYLE_SPECS: [StyleSpec; STYLES] = [
    StyleSpec {
        id: 0,
        pattern: Pattern::Solid,
        palette: [[0.85, 0.2, 0.15], [0.85, 0.2, 0.15]],
    },
    StyleSpec {
        id: 1,
        pattern: Pattern::Stripes,
        palette: [[0.15, 0.3, 0.8], [0.95, 0.85, 0.2]],
    },
    StyleSpec {
        id: 2,
        pattern: Pattern::Dots,
        palette: [[0.15, 0.55, 0.25], [0.05, 0.05, 0.05]],
    },
    StyleSpec {
        id: 3,
        pattern: Pattern::Checker,
        palette: [[0.55, 0.2, 0.65], [0.98, 0.55, 0.1]],
    },
];

impl StyleSpec {
    /// Colour of the pattern at integer pixel `(x, y)`; the pattern is anchored
    /// to image coordinates, not to the shape.
    pub fn color_at(&self, x: usize, y: usize) -> [f32; 3] {
        let second = match self.pattern {
            Pattern::Solid => false,
            Pattern::Stripes => y % 4 >= 2,
            Pattern::Dots => matches!(x % 4, 1 | 2) && matches!(y % 4, 1 | 2),
            Pattern::Checker => ((x / 2) + (y / 2)) % 2 == 1,
        };
        self.palette[second as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; CONTENTS] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether point `(px, py)` lies inside the shape centred at `(cx, cy)` with radius `r`.
    pub fn contains(self, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => {
                // apex (0, -r), base corners (+-r, 0.75 r)
                if dy > 0.75 * r || dy < -r {
                    return false;
                }
                let half_width = r * (dy + r) / (1.75 * r);
                dx.abs() <= half_width
            }
            Shape::Cross => {
                let arm = 0.35 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// One cell of the style x content grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub style: usize,
    pub content: usize,
}

impl Cell {
    pub fn all() -> Vec<Cell> {
        (0..STYLES)
            .flat_map(|style| (0..CONTENTS).map(move |content| Cell { style, content }))
            .collect()
    }

    pub fn index(self) -> usize {
        self.style * CONTENTS + self.content
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.style, self.content)
    }
}

impl FromStr for Cell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cell must look like style:content, got {s:?}"));
        let (a, b) = s.trim().split_once(':').ok_or_else(bad)?;
        let style: usize = a.trim().parse().map_err(|_| bad())?;
        let content: usize = b.trim().parse().map_err(|_| bad())?;
        if style >= STYLES || content >= CONTENTS {
            return Err(Error::Config(format!("cell {s:?} outside the {STYLES}x{CONTENTS} grid")));
        }
        Ok(Cell { style, content })
    }
}

/// Comma-separated list of cells, e.g. `"1:2,3:0,0:3"`. Empty input is an empty list.
pub fn parse_cells(s: &str) -> Result<Vec<Cell>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn format_cells(cells: &[Cell]) -> String {
    cells.iter().map(Cell::to_string).collect::<Vec<_>>().join(",")
}

/// Geometry and background of one render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub background: [f32; 3],
}

impl Placement {
    pub fn nominal() -> Self {
        Placement {
            cx: CENTER,
            cy: CENTER,
            r: RADIUS,
            background: [BACKGROUND as f32; 3],
        }
    }

    /// Centre within `+-2` px, radius within `+-10%`, per-channel background tint.
    pub fn jittered(rng: &mut RngStream) -> Self {
        let cx = CENTER + rng.uniform_range(-CENTER_JITTER, CENTER_JITTER);
        let cy = CENTER + rng.uniform_range(-CENTER_JITTER, CENTER_JITTER);
        let r = RADIUS * rng.uniform_range(1.0 - RADIUS_JITTER, 1.0 + RADIUS_JITTER);
        let mut background = [0.0; 3];
        for c in &mut background {
            *c = (BACKGROUND + rng.uniform_range(-TINT_JITTER, TINT_JITTER)).min(1.0) as f32;
        }
        Placement { cx, cy, r, background }
    }
}

/// Renders `cell` at `placement`, quantised to 8-bit levels. Pixels are
/// sampled at their centres.
pub fn render(cell: Cell, placement: &Placement) -> Image {
    let style = &STYLE_SPECS[cell.style];
    let shape = SHAPES[cell.content];
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, placement.background);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5, placement.cx, placement.cy, placement.r) {
                img.set_pixel(x, y, style.color_at(x, y));
            }
        }
    }
    img.quantized()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_parse_and_print() {
        let cells = parse_cells("1:2,3:0,0:3").unwrap();
        assert_eq!(cells, vec![Cell { style: 1, content: 2 }, Cell { style: 3, content: 0 }, Cell { style: 0, content: 3 }]);
        assert_eq!(format_cells(&cells), "1:2,3:0,0:3");
        assert!(parse_cells("4:0").is_err());
        assert!(parse_cells("1-2").is_err());
        assert!(parse_cells("").unwrap().is_empty());
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let masks: Vec<Vec<bool>> = SHAPES
            .iter()
            .map(|s| {
                (0..IMAGE_SIZE * IMAGE_SIZE)
                    .map(|i| s.contains((i % 24) as f64 + 0.5, (i / 24) as f64 + 0.5, 12.0, 12.0, 7.0))
                    .collect()
            })
            .collect();
        for i in 0..4 {
            let area = masks[i].iter().filter(|&&b| b).count();
            assert!(area > 50, "{:?} area {area}", SHAPES[i]);
            for j in i + 1..4 {
                let diff = masks[i].iter().zip(&masks[j]).filter(|(a, b)| a != b).count();
                assert!(diff > 20);
            }
        }
    }

    #[test]
    fn render_uses_pattern_colours_inside_the_shape() {
        let img = render(Cell { style: 1, content: 1 }, &Placement::nominal());
        let quant = |c: [f32; 3]| c.map(|v| (v * 255.0).round() / 255.0);
        assert_eq!(img.pixel(12, 12), quant(STYLE_SPECS[1].color_at(12, 12)));
        assert_eq!(img.pixel(0, 0), quant([0.92; 3]));
        assert_ne!(img.pixel(12, 12), img.pixel(12, 10));
    }

    #[test]
    fn jitter_stays_in_range() {
        let mut rng = RngStream::new(3, 1);
        for _ in 0..200 {
            let p = Placement::jittered(&mut rng);
            assert!((p.cx - 12.0).abs() <= 2.0 && (p.cy - 12.0).abs() <= 2.0);
            assert!(p.r >= 6.3 && p.r <= 7.7);
            assert!(p.background.iter().all(|&c| (0.86..=0.98).contains(&c)));
        }
    }
}
