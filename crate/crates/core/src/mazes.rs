//! Bundled maze layouts.

/// 12x12 U-shaped corridor; start bottom-left, goal top-left.
pub const UMAZE: &str = include_str!("../mazes/umaze.txt");
/// 12x20 inward spiral; start top-left, goal in the inner column.
pub const SPIRAL: &str = include_str!("../mazes/spiral.txt");
/// 16x11 maze with three goal regions and several dead ends.
pub const THREEWAY: &str = include_str!("../mazes/threeway.txt");

pub fn by_name(name: &str) -> Option<&'static str> {
    match name {
        "umaze" => Some(UMAZE),
        "spiral" => Some(SPIRAL),
        "threeway" => Some(THREEWAY),
        _ => None,
    }
}
