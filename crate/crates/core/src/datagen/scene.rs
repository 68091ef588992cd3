//! Scene layouts: which class covers which pixel. Layouts depend only on
//! the layout seed and the image geometry, never on domain style.

use crate::rng::{self, Rng};

pub const ROAD: u8 = 0;
pub const SKY: u8 = 1;
pub const BUILDING: u8 = 2;
pub const CAR: u8 = 3;
pub const VEGETATION: u8 = 4;

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["road", "sky", "building", "car", "vegetation"];

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Half-open integer box `[x0, x1) × [y0, y1)`.
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    /// Pixel centres within `r` of `(cx, cy)`.
    Circle { cx: f64, cy: f64, r: f64 },
    /// Pixel centres inside the triangle.
    Triangle { pts: [(f64, f64); 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    /// Painted with a lightened tint of the class colour (lane markings).
    pub marking: bool,
}

/// Object list in painter's order (later objects occlude earlier ones).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub layout_seed: u64,
    pub height: usize,
    pub width: usize,
    pub horizon: usize,
    pub objects: Vec<SceneObject>,
}

impl Shape {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => {
                let (x, y) = (x as i32, y as i32);
                x >= x0 && x < x1 && y >= y0 && y < y1
            }
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let e0 = edge(pts[0], pts[1]);
                let e1 = edge(pts[1], pts[2]);
                let e2 = edge(pts[2], pts[0]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

impl Scene {
    /// Samples a street-like layout: sky above the horizon, road below,
    /// 2–6 buildings, 0–3 vegetation triangles, 0–3 cars, then lane markings.
    pub fn sample(layout_seed: u64, height: usize, width: usize) -> Scene {
        let mut r = rng::stream(layout_seed, 0x5CE4E);
        let (hf, wf) = (height as f64, width as f64);
        let horizon = (hf * rng::uniform_in(&mut r, 0.35, 0.5)).round() as usize;
        let mut objects = vec![
            SceneObject {
                class: SKY,
                shape: Shape::Rect {
                    x0: 0,
                    y0: 0,
                    x1: width as i32,
                    y1: horizon as i32,
                },
                marking: false,
            },
            SceneObject {
                class: ROAD,
                shape: Shape::Rect {
                    x0: 0,
                    y0: horizon as i32,
                    x1: width as i32,
                    y1: height as i32,
                },
                marking: false,
            },
        ];
        let ground = hf - horizon as f64;

        for _ in 0..rng::int_in(&mut r, 2, 6) {
            let bw = rng::uniform_in(&mut r, wf / 10.0, wf / 4.0);
            let x0 = rng::uniform_in(&mut r, -bw / 2.0, wf - bw / 2.0);
            let top = horizon as f64 * rng::uniform_in(&mut r, 0.1, 0.8);
            let foot = horizon as f64 + ground * rng::uniform_in(&mut r, 0.05, 0.25);
            objects.push(SceneObject {
                class: BUILDING,
                shape: Shape::Rect {
                    x0: x0.round() as i32,
                    y0: top.round() as i32,
                    x1: (x0 + bw).round() as i32,
                    y1: foot.round() as i32,
                },
                marking: false,
            });
        }
        for _ in 0..rng::int_in(&mut r, 0, 3) {
            let cx = rng::uniform_in(&mut r, 0.0, wf);
            let half = rng::uniform_in(&mut r, wf / 16.0, wf / 8.0);
            let base = horizon as f64 + ground * rng::uniform_in(&mut r, 0.0, 0.3);
            let apex = base - rng::uniform_in(&mut r, hf / 6.0, hf / 2.5);
            objects.push(SceneObject {
                class: VEGETATION,
                shape: Shape::Triangle {
                    pts: [(cx - half, base), (cx + half, base), (cx, apex)],
                },
                marking: false,
            });
        }
        for _ in 0..rng::int_in(&mut r, 0, 3) {
            let radius = rng::uniform_in(&mut r, hf / 16.0, hf / 8.0);
            let cy = horizon as f64 + ground * rng::uniform_in(&mut r, 0.3, 0.9);
            let cx = rng::uniform_in(&mut r, 0.0, wf);
            objects.push(SceneObject {
                class: CAR,
                shape: Shape::Circle { cx, cy, r: radius },
                marking: false,
            });
        }
        let lane_y = (horizon as f64 + ground * rng::uniform_in(&mut r, 0.55, 0.8)).round() as i32;
        let dash = (wf / 8.0).round().max(1.0) as i32;
        let mut x = rng::int_in(&mut r, 0, dash as i64) as i32;
        while x < width as i32 {
            objects.push(SceneObject {
                class: ROAD,
                shape: Shape::Rect {
                    x0: x,
                    y0: lane_y,
                    x1: x + dash,
                    y1: lane_y + 2,
                },
                marking: true,
            });
            x += 2 * dash;
        }
        Scene {
            layout_seed,
            height,
            width,
            horizon,
            objects,
        }
    }

    /// Class per pixel and the lane-marking mask, row-major.
    pub fn rasterize(&self) -> (Vec<u8>, Vec<bool>) {
        let n = self.height * self.width;
        let mut label = vec![SKY; n];
        let mut marking = vec![false; n];
        for obj in &self.objects {
            for y in 0..self.height {
                for x in 0..self.width {
                    if obj.shape.covers(x, y) {
                        label[y * self.width + x] = obj.class;
                        marking[y * self.width + x] = obj.marking;
                    }
                }
            }
        }
        (label, marking)
    }
}

/// Seed of the `index`-th layout drawn from a domain's base seed.
pub fn layout_seed(base_seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    let mut r: Rng = rng::stream(base_seed, index.wrapping_add(1));
    r.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_counts_follow_grammar() {
        for seed in 0..200 {
            let s = Scene::sample(seed, 64, 64);
            let count = |c: u8| s.objects.iter().filter(|o| o.class == c && !o.marking).count();
            assert_eq!(count(SKY), 1);
            assert_eq!(count(ROAD), 1);
            assert!((2..=6).contains(&count(BUILDING)));
            assert!(count(CAR) <= 3);
            assert!(count(VEGETATION) <= 3);
        }
    }

    #[test]
    fn sky_above_horizon_and_road_below_by_default() {
        let s = Scene::sample(3, 64, 64);
        let (label, _) = s.rasterize();
        assert!(label.iter().all(|&c| (c as usize) < NUM_CLASSES));
        assert!(label[..64]
            .iter()
            .all(|&c| c == SKY || c == BUILDING || c == VEGETATION));
    }

    #[test]
    fn triangle_winding_does_not_matter() {
        let a = Shape::Triangle {
            pts: [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)],
        };
        let b = Shape::Triangle {
            pts: [(0.0, 0.0), (0.0, 4.0), (4.0, 0.0)],
        };
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(a.covers(x, y), b.covers(x, y));
            }
        }
    }
}
