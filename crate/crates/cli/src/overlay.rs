use std::fmt::Write;

use posekit_core::synth::keypoint_color;
use posekit_core::{KeypointSchema, Pose};

fn hex(c: [f64; 3]) -> String {
    let b = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", b(c[0]), b(c[1]), b(c[2]))
}

/// Skeleton overlay: limbs as lines, labeled keypoints as dots colored per index.
pub fn render_svg(poses: &[Pose], schema: &KeypointSchema, size: Option<(usize, usize)>) -> String {
    let (w, h) = size.unwrap_or_else(|| {
        let (mut mx, mut my) = (1.0f64, 1.0f64);
        for p in poses {
            for i in (0..p.len()).filter(|&i| p.is_labeled(i)) {
                mx = mx.max(p.coords[i][0]);
                my = my.max(p.coords[i][1]);
            }
        }
        ((mx + 10.0).ceil() as usize, (my + 10.0).ceil() as usize)
    });
    let k = schema.size();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#202020"/>"##);
    for (n, p) in poses.iter().enumerate() {
        let _ = writeln!(s, r#"<g id="instance-{n}">"#);
        for [a, b] in schema.skeleton() {
            if *a < p.len() && *b < p.len() && p.is_labeled(*a) && p.is_labeled(*b) {
                let (pa, pb) = (p.coords[*a], p.coords[*b]);
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"/>"#,
                    pa[0],
                    pa[1],
                    pb[0],
                    pb[1],
                    hex(keypoint_color(*a, k))
                );
            }
        }
        for i in (0..p.len()).filter(|&i| p.is_labeled(i)) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}"/>"#,
                p.coords[i][0],
                p.coords[i][1],
                hex(keypoint_color(i, k))
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_labeled_points_and_limbs() {
        let schema = KeypointSchema::synthetic3();
        let mut p = Pose::visible(vec![[5.0, 5.0], [20.0, 8.0], [12.0, 30.0]]);
        p.visibility[2] = 0;
        let svg = render_svg(&[p], &schema, None);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains(r#"width="30""#));
    }
}
