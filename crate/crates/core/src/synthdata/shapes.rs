//! Scene vocabulary, object geometry and anti-aliased rasterisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const PAD: u32 = 0;
pub const THE: u32 = 1;
pub const VOCAB_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Bar,
    LShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
    Largest,
    Smallest,
}

macro_rules! vocab_enum {
    ($t:ty, $base:expr, [$($v:ident => $name:literal),+ $(,)?]) => {
        impl $t {
            pub const ALL: &'static [$t] = &[$(<$t>::$v),+];

            pub fn token(self) -> u32 {
                $base + Self::ALL.iter().position(|&x| x == self).unwrap() as u32
            }

            pub fn from_token(id: u32) -> Option<Self> {
                id.checked_sub($base).and_then(|i| Self::ALL.get(i as usize).copied())
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(<$t>::$v => $name),+
                }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|x| x.name() == s)
            }
        }
    };
}

vocab_enum!(Color, 2, [Red => "red", Green => "green", Blue => "blue", Yellow => "yellow"]);
vocab_enum!(ShapeKind, 6, [Disk => "disk", Rectangle => "rectangle", Bar => "bar", LShape => "l-shape"]);
vocab_enum!(Relation, 10, [
    Leftmost => "leftmost",
    Rightmost => "rightmost",
    Topmost => "topmost",
    Bottommost => "bottommost",
    Largest => "largest",
    Smallest => "smallest",
]);

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.86, 0.16, 0.14],
            Color::Green => [0.16, 0.72, 0.22],
            Color::Blue => [0.18, 0.30, 0.92],
            Color::Yellow => [0.92, 0.84, 0.16],
        }
    }
}

/// Axis-aligned box `[x0, y0, x1, y1]` in continuous pixel coordinates.
pub type Rect = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Disk { cx: f64, cy: f64, r: f64 },
    /// Union of axis-aligned boxes (rectangles, bars, L-shapes).
    Boxes(Vec<Rect>),
}

impl Geometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Geometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Boxes(bs) => bs.iter().any(|b| x >= b[0] && x < b[2] && y >= b[1] && y < b[3]),
        }
    }

    pub fn bbox(&self) -> Rect {
        match self {
            Geometry::Disk { cx, cy, r } => [cx - r, cy - r, cx + r, cy + r],
            Geometry::Boxes(bs) => bs.iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |a, b| [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])],
            ),
        }
    }

    /// Random geometry of the given kind with its top-left bbox corner at the origin.
    pub fn sample(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            ShapeKind::Disk => {
                let r = rng.random_range(3.0..8.0);
                Geometry::Disk { cx: r, cy: r, r }
            }
            ShapeKind::Rectangle => {
                let w = rng.random_range(7.0..16.0);
                let h = rng.random_range(7.0..16.0);
                Geometry::Boxes(vec![[0.0, 0.0, w, h]])
            }
            ShapeKind::Bar => {
                let len = rng.random_range(16.0..28.0);
                let width = rng.random_range(3.0..4.0);
                if rng.random_bool(0.5) {
                    Geometry::Boxes(vec![[0.0, 0.0, len, width]])
                } else {
                    Geometry::Boxes(vec![[0.0, 0.0, width, len]])
                }
            }
            ShapeKind::LShape => {
                let a = rng.random_range(10.0..16.0);
                let b = rng.random_range(10.0..16.0);
                let t = rng.random_range(3.5..5.0);
                // Vertical arm on the left or right, horizontal arm on top or bottom.
                let right = rng.random_bool(0.5);
                let bottom = rng.random_bool(0.5);
                let vx = if right { b - t } else { 0.0 };
                let hy = if bottom { a - t } else { 0.0 };
                Geometry::Boxes(vec![[vx, 0.0, vx + t, a], [0.0, hy, b, hy + t]])
            }
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        match self {
            Geometry::Disk { cx, cy, r } => Geometry::Disk { cx: cx + dx, cy: cy + dy, r: *r },
            Geometry::Boxes(bs) => Geometry::Boxes(bs.iter().map(|b| [b[0] + dx, b[1] + dy, b[2] + dx, b[3] + dy]).collect()),
        }
    }

    /// Fractional pixel coverage on an `h x w` canvas from `ss x ss`
    /// supersampling.
    pub fn coverage(&self, h: usize, w: usize, ss: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        let bb = self.bbox();
        let y0 = (bb[1].floor().max(0.0)) as usize;
        let x0 = (bb[0].floor().max(0.0)) as usize;
        let y1 = (bb[3].ceil().max(0.0) as usize).min(h);
        let x1 = (bb[2].ceil().max(0.0) as usize).min(w);
        let inv = 1.0 / (ss * ss) as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        hits += self.contains(px, py) as usize;
                    }
                }
                out[y * w + x] = hits as f64 * inv;
            }
        }
        out
    }
}

/// Boxes overlap once each is grown by `gap` on every side.
pub fn boxes_overlap(a: &Rect, b: &Rect, gap: f64) -> bool {
    a[0] - gap < b[2] && b[0] - gap < a[2] && a[1] - gap < b[3] && b[1] - gap < a[3]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tokens_are_distinct_and_round_trip() {
        let mut seen = std::collections::HashSet::new();
        for c in Color::ALL {
            assert_eq!(Color::from_token(c.token()), Some(*c));
            assert_eq!(Color::from_name(c.name()), Some(*c));
            assert!(seen.insert(c.token()));
        }
        for s in ShapeKind::ALL {
            assert_eq!(ShapeKind::from_token(s.token()), Some(*s));
            assert!(seen.insert(s.token()));
        }
        for r in Relation::ALL {
            assert_eq!(Relation::from_token(r.token()), Some(*r));
            assert!(seen.insert(r.token()));
        }
        assert!(seen.iter().all(|&t| t > THE && (t as usize) < VOCAB_SIZE));
        assert_eq!(Color::from_token(1), None);
    }

    #[test]
    fn box_coverage_is_exact_on_pixel_grid() {
        let g = Geometry::Boxes(vec![[1.0, 1.0, 3.0, 2.0]]);
        let c = g.coverage(3, 4, 4);
        assert_eq!(c, vec![0., 0., 0., 0., 0., 1., 1., 0., 0., 0., 0., 0.]);
        let half = Geometry::Boxes(vec![[0.5, 0.0, 1.0, 1.0]]).coverage(1, 2, 4);
        assert_eq!(half, vec![0.5, 0.0]);
    }

    #[test]
    fn sampled_shapes_start_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in ShapeKind::ALL {
            for _ in 0..20 {
                let bb = Geometry::sample(*kind, &mut rng).bbox();
                assert!(bb[0].abs() < 1e-12 && bb[1].abs() < 1e-12);
                assert!(bb[2] > 2.0 && bb[3] > 2.0);
            }
        }
    }

    #[test]
    fn overlap_with_gap() {
        let a = [0.0, 0.0, 4.0, 4.0];
        assert!(!boxes_overlap(&a, &[6.0, 0.0, 8.0, 4.0], 1.0));
        assert!(boxes_overlap(&a, &[4.5, 0.0, 8.0, 4.0], 1.0));
    }
}
