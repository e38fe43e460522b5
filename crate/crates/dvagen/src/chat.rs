//! Line-oriented chat loop: each line is a prefix, `/phrases a; b; c` sets
//! explicit phrases for following prefixes, `/quit` exits.

use std::io::{BufRead, Write};

use dvagen_core::inference::{GenerationConfig, GenerationSession, Generator};
use dvagen_core::tokenizer::SegmentKind;

use crate::error::{AppError, AppResult};

/// Phrase segments are wrapped in `[[...]]`.
pub fn render(session: &GenerationSession) -> String {
    session
        .segments
        .iter()
        .map(|s| match s.kind {
            SegmentKind::Token => s.text.clone(),
            SegmentKind::Phrase => format!("[[{}]]", s.text),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_phrases(arg: &str) -> Option<Vec<String>> {
    let list: Vec<String> = arg
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    (!list.is_empty()).then_some(list)
}

pub fn run_chat(
    generator: &Generator,
    config: &GenerationConfig,
    input: impl BufRead,
    mut output: impl Write,
) -> AppResult<i32> {
    let io = |e| AppError::io("<stdout>", e);
    let mut phrases: Option<Vec<String>> = None;
    for line in input.lines() {
        let line = line.map_err(|e| AppError::io("<stdin>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            return Ok(0);
        }
        if let Some(rest) = line.strip_prefix("/phrases") {
            phrases = parse_phrases(rest);
            match &phrases {
                Some(p) => writeln!(output, "phrases: {}", p.join(" | ")).map_err(io)?,
                None => writeln!(output, "phrases: (retrieved)").map_err(io)?,
            }
            continue;
        }
        match generator.generate_single(line, phrases.as_deref(), config) {
            Ok(s) => writeln!(output, "{}", render(&s)).map_err(io)?,
            Err(e) => writeln!(output, "error: {e}").map_err(io)?,
        }
        output.flush().map_err(io)?;
    }
    Ok(0)
}
