//! Hand-written SVG of loss, tone DI and control DI against epoch.

use std::fmt::Write as _;

use tonescope_core::fairness::independence_band;

use crate::persist::HistoryRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
pub const Y_MAX: f64 = 1.3;

struct Frame {
    epochs: (f64, f64),
}

impl Frame {
    fn x(&self, epoch: f64) -> f64 {
        let (lo, hi) = self.epochs;
        let span = if hi > lo { hi - lo } else { 1.0 };
        LEFT + (epoch - lo) / span * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, Y_MAX);
        TOP + (1.0 - v / Y_MAX) * (HEIGHT - TOP - BOTTOM)
    }
}

/// Polylines broken wherever the series is missing.
fn series(
    out: &mut String,
    frame: &Frame,
    points: &[(usize, Option<f64>)],
    color: &str,
    dash: &str,
) {
    let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
    for &(epoch, v) in points {
        match v {
            Some(v) if v.is_finite() => segments
                .last_mut()
                .expect("non-empty")
                .push((frame.x(epoch as f64), frame.y(v))),
            _ => segments.push(Vec::new()),
        }
    }
    for seg in segments.iter().filter(|s| !s.is_empty()) {
        let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        if seg.len() == 1 {
            let (x, y) = seg[0];
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}"/>"#
            );
        } else {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                pts.join(" ")
            );
        }
    }
}

/// Renders the curves for `rows` with the independence band for `epsilon`.
/// Values above 1.3 are clipped to the top edge.
pub fn render_curves(rows: &[HistoryRow], epsilon: f64) -> String {
    let first = rows.first().map_or(1, |r| r.epoch) as f64;
    let last = rows.last().map_or(1, |r| r.epoch) as f64;
    let frame = Frame {
        epochs: (first, last),
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );

    let (lo, hi) = independence_band(epsilon);
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let _ = writeln!(
        s,
        r##"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#dfeedd"/>"##,
        frame.y(hi),
        x1 - x0,
        frame.y(lo) - frame.y(hi)
    );

    // Axes, y ticks every 0.1 with labels every 0.2.
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{:.2}" x2="{x1:.2}" y2="{:.2}" stroke="black"/>"#,
        frame.y(0.0),
        frame.y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{:.2}" x2="{x0:.2}" y2="{:.2}" stroke="black"/>"#,
        frame.y(0.0),
        frame.y(Y_MAX)
    );
    for i in 0..=13 {
        let v = f64::from(i) / 10.0;
        let y = frame.y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"#,
            x0 - 4.0
        );
        if i % 2 == 0 || i == 13 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
                x0 - 7.0,
                y + 4.0
            );
        }
    }
    let span = (last - first).max(0.0) as usize;
    let step = [1usize, 2, 5, 10, 20, 25, 50, 100, 200, 250, 500, 1000]
        .into_iter()
        .find(|&st| span / st <= 10)
        .unwrap_or(span.max(1));
    let mut e = first as usize;
    while e as f64 <= last {
        let x = frame.x(e as f64);
        let y = frame.y(0.0);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            y + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            y + 17.0
        );
        e += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );

    let pick = |f: fn(&HistoryRow) -> Option<f64>| -> Vec<(usize, Option<f64>)> {
        rows.iter().map(|r| (r.epoch, f(r))).collect()
    };
    series(&mut s, &frame, &pick(|r| Some(r.train_loss)), "#444444", "");
    series(&mut s, &frame, &pick(|r| r.tone_di), "#c0392b", "");
    series(
        &mut s,
        &frame,
        &pick(|r| r.control_di),
        "#2471a3",
        r#" stroke-dasharray="5,3""#,
    );

    let legend = [
        ("train loss", "#444444"),
        ("tone DI", "#c0392b"),
        ("control DI", "#2471a3"),
        ("DI band", "#dfeedd"),
    ];
    for (i, (label, color)) in legend.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="14" height="8" fill="{color}"/>"#,
            y - 7.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">{label}</text>"#, x + 20.0);
    }
    s.push_str("</svg>\n");
    s
}
