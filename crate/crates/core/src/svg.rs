//! Minimal SVG scatter emission for report bundles.

use ndarray::ArrayView2;

use crate::scalar::Scalar;

const PALETTE: [&str; 10] = [
    "#4E79A7", "#F28E2B", "#E15759", "#76B7B2", "#59A14F", "#EDC948", "#B07AA1", "#FF9DA7",
    "#9C755F", "#BAB0AC",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Scatter plot of 2-D coordinates, colored by an optional category per
/// row. Output is a deterministic string for byte-stable artifacts.
pub fn scatter_svg<S: Scalar>(
    coords: &ArrayView2<S>,
    categories: Option<&[String]>,
    title: &str,
) -> String {
    let n = coords.nrows();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..n {
        let x = coords[[r, 0]].as_f64();
        let y = coords[[r, 1]].as_f64();
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    if !min_x.is_finite() {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);

    // category -> color index, in order of first appearance
    let mut legend: Vec<String> = Vec::new();
    let color_of = |cat: Option<&str>, legend: &mut Vec<String>| -> usize {
        match cat {
            None => 0,
            Some(c) => match legend.iter().position(|l| l == c) {
                Some(i) => i,
                None => {
                    legend.push(c.to_string());
                    legend.len() - 1
                }
            },
        }
    };

    let mut circles = String::new();
    for r in 0..n {
        let x = coords[[r, 0]].as_f64();
        let y = coords[[r, 1]].as_f64();
        let px = MARGIN + (x - min_x) / span_x * (WIDTH - 2.0 * MARGIN);
        let py = HEIGHT - MARGIN - (y - min_y) / span_y * (HEIGHT - 2.0 * MARGIN);
        let color_idx = color_of(categories.map(|c| c[r].as_str()), &mut legend);
        circles.push_str(&format!(
            "  <circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>\n",
            PALETTE[color_idx % PALETTE.len()]
        ));
    }

    let mut legend_svg = String::new();
    for (i, cat) in legend.iter().enumerate() {
        let ly = MARGIN + 16.0 * i as f64;
        legend_svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{ly:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>\n",
            WIDTH - MARGIN - 110.0,
            PALETTE[i % PALETTE.len()],
            WIDTH - MARGIN - 96.0,
            ly + 9.0,
            cat,
        ));
    }

    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"24\" font-size=\"14\" font-family=\"sans-serif\">{title}</text>\n{circles}{legend_svg}</svg>\n",
        MARGIN
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn svg_is_deterministic_and_tags_categories() {
        let coords = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]];
        let cats: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let one = scatter_svg(&coords.view(), Some(&cats), "demo");
        let two = scatter_svg(&coords.view(), Some(&cats), "demo");
        assert_eq!(one, two);
        assert!(one.contains("<svg"));
        assert!(one.matches("<circle").count() == 3);
        assert!(one.contains(">a</text>"));
        assert!(one.contains(">b</text>"));
    }
}
