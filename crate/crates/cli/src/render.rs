//! Top-view SVG drawings of scenes.

use std::collections::BTreeSet;
use std::fmt::Write;

use scenediff::scene::SceneObject;

/// Pixels per meter.
const SCALE: f64 = 100.0;
/// Canvas padding around the drawn extent, in meters.
const PAD: f64 = 0.5;
const LEGEND_WIDTH: f64 = 160.0;

/// Stable color for a category label.
pub fn category_color(label: &str) -> String {
    let mut h: u32 = 0x811c_9dc5;
    for b in label.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    let hue = h % 360;
    format!("hsl({hue},60%,55%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Orthographic view from above: `x` to the right, `y` (front) up the page.
/// Each object is drawn as its axis-aligned footprint with its label at the
/// centroid, followed by a legend of categories.
pub fn render_top_view(objects: &[SceneObject]) -> String {
    // World extent, always containing the origin.
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for o in objects {
        let (hx, hy) = (0.5 * o.size[0].abs(), 0.5 * o.size[1].abs());
        x0 = x0.min(o.centroid[0] - hx);
        x1 = x1.max(o.centroid[0] + hx);
        y0 = y0.min(o.centroid[1] - hy);
        y1 = y1.max(o.centroid[1] + hy);
    }
    let (x0, x1, y0, y1) = (x0 - PAD, x1 + PAD, y0 - PAD, y1 + PAD);
    let px = |x: f64| (x - x0) * SCALE;
    let py = |y: f64| (y1 - y) * SCALE;
    let width = (x1 - x0) * SCALE;
    let height = (y1 - y0) * SCALE;
    let categories: BTreeSet<&str> = objects.iter().map(|o| o.label.as_str()).collect();
    let total_height = height.max(30.0 + 20.0 * categories.len() as f64);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.1}" height="{:.1}" viewBox="0 0 {:.1} {:.1}">"#,
        width + LEGEND_WIDTH,
        total_height,
        width + LEGEND_WIDTH,
        total_height
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{width:.1}" height="{height:.1}" fill="white" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r##"<line class="axis" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(x0),
        py(0.0),
        px(x1),
        py(0.0)
    );
    let _ = writeln!(
        svg,
        r##"<line class="axis" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(y0),
        px(0.0),
        py(y1)
    );
    for o in objects {
        let (sx, sy) = (o.size[0].abs(), o.size[1].abs());
        let _ = writeln!(
            svg,
            r#"<rect class="box" x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}" fill-opacity="0.6" stroke="black"/>"#,
            px(o.centroid[0] - 0.5 * sx),
            py(o.centroid[1] + 0.5 * sy),
            sx * SCALE,
            sy * SCALE,
            category_color(&o.label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            px(o.centroid[0]),
            py(o.centroid[1]),
            escape(&o.label)
        );
    }
    let _ = writeln!(svg, r#"<g class="legend">"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" font-size="14">legend</text>"#,
        width + 10.0
    );
    for (i, label) in categories.iter().enumerate() {
        let y = 30.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{y:.1}" width="12" height="12" fill="{}"/>"#,
            width + 10.0,
            category_color(label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
            width + 28.0,
            y + 10.0,
            escape(label)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_axes_and_legend_only() {
        let svg = render_top_view(&[]);
        assert_eq!(svg.matches(r#"class="axis""#).count(), 2);
        assert!(svg.contains(r#"class="legend""#));
        assert!(!svg.contains(r#"class="box""#));
    }

    #[test]
    fn unit_box_at_origin() {
        let obj = SceneObject::axis_aligned("table", [0.0, 0.0, 0.4], [1.0, 1.0, 0.8]);
        let svg = render_top_view(&[obj]);
        // Extent [-1, 1]² after padding, so the origin maps to (100, 100).
        assert!(svg.contains(r#"<rect class="box" x="50.0" y="50.0" width="100.0" height="100.0""#), "{svg}");
        assert_eq!(svg, render_top_view(&[SceneObject::axis_aligned("table", [0.0, 0.0, 0.4], [1.0, 1.0, 0.8])]));
    }

    #[test]
    fn colors_are_stable_per_category() {
        assert_eq!(category_color("chair"), category_color("chair"));
        assert_ne!(category_color("chair"), category_color("table"));
    }
}
