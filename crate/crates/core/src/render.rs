//! Timeline renderings: ground truth above the prediction, time running
//! left to right, hand-free frames red and object-held frames green.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::planning::LabelTimeline;

pub const FREE_COLOR: &str = "#d62728";
pub const HELD_COLOR: &str = "#2ca02c";
const FRAME_PX: usize = 2;
const BAR_PX: usize = 24;
const GAP_PX: usize = 8;
const LABEL_PX: usize = 48;

/// Maximal runs of equal labels as `(start, len, held)`.
pub fn runs(tl: &LabelTimeline) -> Vec<(usize, usize, bool)> {
    let mut out: Vec<(usize, usize, bool)> = Vec::new();
    for (t, l) in tl.labels.iter().enumerate() {
        match out.last_mut() {
            Some((_, len, held)) if *held == l.is_held() => *len += 1,
            _ => out.push((t, 1, l.is_held())),
        }
    }
    out
}

fn bars<'a>(pred: &'a LabelTimeline, gt: Option<&'a LabelTimeline>) -> Result<Vec<(&'static str, &'a LabelTimeline)>> {
    if let Some(g) = gt {
        if g.len() != pred.len() {
            return Err(Error::Shape(format!(
                "ground truth has {} frames, prediction {}",
                g.len(),
                pred.len()
            )));
        }
    }
    Ok(gt.map(|g| ("gt", g)).into_iter().chain([("pred", pred)]).collect())
}

/// One line per bar; `.` for hand-free frames, `#` for held frames.
pub fn render_text(pred: &LabelTimeline, gt: Option<&LabelTimeline>) -> Result<String> {
    let mut s = String::new();
    for (name, tl) in bars(pred, gt)? {
        let line: String = tl.labels.iter().map(|l| if l.is_held() { '#' } else { '.' }).collect();
        let _ = writeln!(s, "{name:<4} |{line}|");
    }
    Ok(s)
}

pub fn render_svg(pred: &LabelTimeline, gt: Option<&LabelTimeline>) -> Result<String> {
    let bars = bars(pred, gt)?;
    let width = LABEL_PX + FRAME_PX * pred.len().max(1);
    let height = bars.len() * BAR_PX + (bars.len() + 1) * GAP_PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for (row, (name, tl)) in bars.iter().enumerate() {
        let y = GAP_PX + row * (BAR_PX + GAP_PX);
        let _ = writeln!(
            s,
            r#"  <text x="4" y="{}" font-family="monospace" font-size="12">{name}</text>"#,
            y + BAR_PX / 2 + 4
        );
        for (start, len, held) in runs(tl) {
            let color = if held { HELD_COLOR } else { FREE_COLOR };
            let _ = writeln!(
                s,
                r#"  <rect x="{}" y="{y}" width="{}" height="{BAR_PX}" fill="{color}"/>"#,
                LABEL_PX + start * FRAME_PX,
                len * FRAME_PX
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}
