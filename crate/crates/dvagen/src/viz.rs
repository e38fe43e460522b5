//! Probability heat rendering: a blue ramp for tokens, a purple-red ramp
//! for phrases, and an SVG view with a legend.

use std::fmt::Write as _;

use dvagen_core::inference::GenerationSession;
use dvagen_core::tokenizer::SegmentKind;
use serde::{Deserialize, Serialize};

/// Lightest and darkest RGB endpoints of a ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ramp {
    pub light: [f64; 3],
    pub dark: [f64; 3],
}

pub const TOKEN_RAMP: Ramp = Ramp {
    light: [222.0, 235.0, 247.0],
    dark: [8.0, 48.0, 107.0],
};

pub const PHRASE_RAMP: Ramp = Ramp {
    light: [250.0, 224.0, 236.0],
    dark: [103.0, 0.0, 61.0],
};

pub fn ramp_for(kind: SegmentKind) -> Ramp {
    match kind {
        SegmentKind::Token => TOKEN_RAMP,
        SegmentKind::Phrase => PHRASE_RAMP,
    }
}

/// Shade in `[0, 1]`; equal to the clamped probability, so it is strictly
/// increasing in probability.
pub fn shade(probability: f64) -> f64 {
    if probability.is_nan() {
        0.0
    } else {
        probability.clamp(0.0, 1.0)
    }
}

/// CSS color for a shade, interpolated from the light to the dark end.
/// Channels are printed as percentages so that distinct shades stay
/// distinct well below 8-bit resolution.
pub fn color(kind: SegmentKind, probability: f64) -> String {
    let r = ramp_for(kind);
    let s = shade(probability);
    let ch = |i: usize| (r.light[i] + (r.dark[i] - r.light[i]) * s) / 255.0 * 100.0;
    format!("rgb({:.6}%, {:.6}%, {:.6}%)", ch(0), ch(1), ch(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatSegment {
    pub text: String,
    pub kind: SegmentKind,
    pub probability: f64,
    pub shade: f64,
    pub color: String,
}

pub fn heat_segments(session: &GenerationSession) -> Vec<HeatSegment> {
    session
        .segments
        .iter()
        .map(|s| HeatSegment {
            text: s.text.clone(),
            kind: s.kind,
            probability: s.probability,
            shade: shade(s.probability),
            color: color(s.kind, s.probability),
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const CHAR_W: f64 = 8.0;
const LINE_H: f64 = 26.0;
const WIDTH: f64 = 720.0;

/// Legend on top, then one `<g class="segment">` per segment, wrapped.
pub fn render_svg(segments: &[HeatSegment]) -> String {
    let mut body = String::new();
    let (mut x, mut y) = (10.0, 110.0);
    for (i, s) in segments.iter().enumerate() {
        let w = s.text.chars().count() as f64 * CHAR_W + 10.0;
        if x + w > WIDTH - 10.0 && x > 10.0 {
            x = 10.0;
            y += LINE_H;
        }
        let ink = if s.shade > 0.55 { "white" } else { "black" };
        let _ = writeln!(
            body,
            r#"<g class="segment" data-index="{i}" data-kind="{}" data-probability="{}"><rect x="{x:.1}" y="{:.1}" width="{w:.1}" height="20" rx="3" fill="{}"/><text x="{:.1}" y="{:.1}" fill="{ink}">{}</text></g>"#,
            match s.kind {
                SegmentKind::Token => "token",
                SegmentKind::Phrase => "phrase",
            },
            s.probability,
            y - 15.0,
            s.color,
            x + 5.0,
            y,
            escape(&s.text)
        );
        x += w + 4.0;
    }
    let height = y + 20.0;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="monospace" font-size="13">"#
    );
    out.push('\n');
    out.push_str("<defs>\n");
    for (id, kind) in [
        ("token-ramp", SegmentKind::Token),
        ("phrase-ramp", SegmentKind::Phrase),
    ] {
        let _ = writeln!(
            out,
            r#"<linearGradient id="{id}"><stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient>"#,
            color(kind, 0.0),
            color(kind, 1.0)
        );
    }
    out.push_str("</defs>\n<g class=\"legend\">\n");
    for (row, (label, id)) in [("token", "token-ramp"), ("phrase", "phrase-ramp")]
        .iter()
        .enumerate()
    {
        let ly = 20.0 + row as f64 * 30.0;
        let _ = writeln!(
            out,
            r#"<text x="10" y="{:.1}">{label}</text><rect x="80" y="{:.1}" width="200" height="14" fill="url(#{id})"/><text x="80" y="{:.1}" font-size="10">0</text><text x="280" y="{:.1}" font-size="10" text-anchor="end">1</text>"#,
            ly + 11.0,
            ly,
            ly + 25.0,
            ly + 25.0
        );
    }
    out.push_str(r#"<text x="300" y="31" font-size="11">shade = probability</text>"#);
    out.push_str("\n</g>\n");
    out.push_str(&body);
    out.push_str("</svg>\n");
    out
}
