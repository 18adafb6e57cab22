//! Cell coordinates and the discrete per-agent action space.

use serde::{Deserialize, Serialize};

/// A cell on the grid. `(0, 0)` is the base-station corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub x: i32,
    pub y: i32,
}

impl GridPos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: GridPos) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// Euclidean distance in cells.
    pub fn euclidean(self, other: GridPos) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        dx.hypot(dy)
    }

    pub fn offset(self, mv: Move) -> GridPos {
        let (dx, dy) = mv.delta();
        GridPos::new(self.x + dx, self.y + dy)
    }

    pub fn in_bounds(self, width: u32, height: u32) -> bool {
        self.x >= 0 && self.y >= 0 && (self.x as u32) < width && (self.y as u32) < height
    }
}

impl std::fmt::Display for GridPos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// One grid step. `Up` increases `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stay];
    pub const COUNT: usize = 5;

    pub fn delta(self) -> (i32, i32) {
        match self {
            Move::Up => (0, 1),
            Move::Down => (0, -1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
            Move::Stay => (0, 0),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Move::Up => 0,
            Move::Down => 1,
            Move::Left => 2,
            Move::Right => 3,
            Move::Stay => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Move> {
        Move::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Move::Up => "up",
            Move::Down => "down",
            Move::Left => "left",
            Move::Right => "right",
            Move::Stay => "stay",
        }
    }

    pub fn parse(s: &str) -> Option<Move> {
        Move::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Compound action: a movement plus the binary deployment-request bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub mv: Move,
    pub request: bool,
}

impl Action {
    /// Width of the movement head.
    pub const MOVE_DIM: usize = 5;
    /// Width of the request head (deploy / don't).
    pub const REQUEST_DIM: usize = 2;
    /// Width of the concatenated one-hot encoding.
    pub const ONE_HOT_DIM: usize = Self::MOVE_DIM + Self::REQUEST_DIM;

    pub const STAY: Action = Action { mv: Move::Stay, request: false };

    pub fn new(mv: Move, request: bool) -> Self {
        Self { mv, request }
    }

    /// `[one-hot(move) || one-hot(request)]`.
    pub fn one_hot(self) -> [f64; Self::ONE_HOT_DIM] {
        let mut v = [0.0; Self::ONE_HOT_DIM];
        v[self.mv.index()] = 1.0;
        v[Self::MOVE_DIM + usize::from(self.request)] = 1.0;
        v
    }
}

impl Default for Action {
    fn default() -> Self {
        Action::STAY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_dimensions() {
        assert_eq!(Move::ALL.len(), Action::MOVE_DIM);
        assert_eq!(Action::ONE_HOT_DIM, 7);
        let oh = Action::new(Move::Left, true).one_hot();
        assert_eq!(oh, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn distances() {
        let a = GridPos::new(0, 0);
        assert_eq!(a.manhattan(GridPos::new(1, 2)), 3);
        assert_eq!(a.manhattan(GridPos::new(3, 3)), 6);
        assert!((a.euclidean(GridPos::new(3, 4)) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn move_roundtrip() {
        for m in Move::ALL {
            assert_eq!(Move::from_index(m.index()), Some(m));
            assert_eq!(Move::parse(m.name()), Some(m));
        }
        assert_eq!(GridPos::new(0, 0).offset(Move::Left), GridPos::new(-1, 0));
        assert!(!GridPos::new(-1, 0).in_bounds(10, 10));
    }
}
