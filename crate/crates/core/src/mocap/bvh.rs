use std::fmt::Write as _;
use std::path::Path;

use super::{Channel, Joint, RawClip, Skeleton};
use crate::error::{DfnError, Result};

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn new(lines: &[(usize, &'a str)]) -> Self {
        let items = lines
            .iter()
            .flat_map(|&(n, l)| l.split_whitespace().map(move |t| (n, t)))
            .collect();
        let last_line = lines.last().map(|l| l.0).unwrap_or(1);
        Tokens {
            items,
            pos: 0,
            last_line,
        }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        let t = self
            .items
            .get(self.pos)
            .copied()
            .ok_or_else(|| DfnError::parse(self.last_line, "unexpected end of hierarchy"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, word: &str) -> Result<usize> {
        let (line, tok) = self.next()?;
        if tok.eq_ignore_ascii_case(word) {
            Ok(line)
        } else {
            Err(DfnError::parse(line, format!("expected '{word}', found '{tok}'")))
        }
    }

    fn number(&mut self) -> Result<f64> {
        let (line, tok) = self.next()?;
        tok.parse::<f64>()
            .map_err(|_| DfnError::parse(line, format!("invalid number '{tok}'")))
    }

    fn offset(&mut self) -> Result<[f64; 3]> {
        self.expect("OFFSET")?;
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

/// Parses a BVH document (HIERARCHY followed by MOTION).
pub fn parse_bvh(source: &str) -> Result<RawClip> {
    let lines: Vec<(usize, &str)> = source.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let motion_idx = lines
        .iter()
        .position(|(_, l)| l.trim().eq_ignore_ascii_case("MOTION"))
        .ok_or_else(|| DfnError::parse(lines.len().max(1), "missing MOTION section"))?;

    let mut toks = Tokens::new(&lines[..motion_idx]);
    toks.expect("HIERARCHY")?;
    toks.expect("ROOT")?;
    let mut joints = Vec::new();
    parse_joint(&mut toks, None, &mut joints)?;
    if let Ok((line, tok)) = toks.next() {
        return Err(DfnError::parse(line, format!("unexpected '{tok}' after root joint")));
    }
    let skeleton = Skeleton::new(joints)?;
    let channels = skeleton.channel_count();

    let mut rest = lines[motion_idx + 1..].iter().filter(|(_, l)| !l.trim().is_empty());
    let (frames_line, frames_text) = rest
        .next()
        .ok_or_else(|| DfnError::parse(lines.len(), "missing 'Frames:' line"))?;
    let declared = header_value(frames_text, "Frames:", *frames_line)?;
    if declared.fract() != 0.0 || declared < 0.0 {
        return Err(DfnError::parse(*frames_line, format!("invalid frame count {declared}")));
    }
    let declared = declared as usize;
    if declared == 0 {
        return Err(DfnError::parse(*frames_line, "clip declares zero frames"));
    }
    let (time_line, time_text) = rest
        .next()
        .ok_or_else(|| DfnError::parse(*frames_line, "missing 'Frame Time:' line"))?;
    let frame_time = header_value(time_text, "Frame Time:", *time_line)?;
    if !(frame_time > 0.0) {
        return Err(DfnError::parse(
            *time_line,
            format!("frame time must be positive, got {frame_time}"),
        ));
    }

    let mut frames = Vec::with_capacity(declared);
    for &(line, text) in rest {
        let values = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| DfnError::parse(line, format!("invalid number '{t}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != channels {
            return Err(DfnError::parse(
                line,
                format!(
                    "frame has {} values, skeleton declares {channels} channels",
                    values.len()
                ),
            ));
        }
        frames.push(values);
    }
    if frames.len() != declared {
        return Err(DfnError::parse(
            lines.len(),
            format!("declared {declared} frames, found {}", frames.len()),
        ));
    }
    Ok(RawClip {
        skeleton,
        frame_time,
        frames,
    })
}

fn header_value(text: &str, key: &str, line: usize) -> Result<f64> {
    let t = text.trim();
    if t.len() < key.len() || !t[..key.len()].eq_ignore_ascii_case(key) {
        return Err(DfnError::parse(line, format!("expected '{key}'")));
    }
    let v = t[key.len()..].trim();
    v.parse::<f64>()
        .map_err(|_| DfnError::parse(line, format!("invalid number '{v}'")))
}

fn parse_joint(toks: &mut Tokens, parent: Option<usize>, joints: &mut Vec<Joint>) -> Result<()> {
    let (_, name) = toks.next()?;
    toks.expect("{")?;
    let offset = toks.offset()?;
    let line = toks.expect("CHANNELS")?;
    let count = toks.number()?;
    if count.fract() != 0.0 || !(0.0..=6.0).contains(&count) {
        return Err(DfnError::parse(line, format!("invalid channel count {count}")));
    }
    let mut channels = Vec::new();
    for _ in 0..count as usize {
        let (line, tok) = toks.next()?;
        channels.push(Channel::parse(tok).ok_or_else(|| DfnError::parse(line, format!("unknown channel '{tok}'")))?);
    }
    let index = joints.len();
    joints.push(Joint {
        name: name.to_string(),
        parent,
        offset,
        channels,
        end_site: None,
    });
    loop {
        let (line, tok) = toks.next()?;
        match tok.to_ascii_uppercase().as_str() {
            "JOINT" => parse_joint(toks, Some(index), joints)?,
            "END" => {
                toks.expect("Site")?;
                toks.expect("{")?;
                let site = toks.offset()?;
                toks.expect("}")?;
                joints[index].end_site = Some(site);
            }
            "}" => return Ok(()),
            _ => return Err(DfnError::parse(line, format!("unexpected '{tok}' in joint '{name}'"))),
        }
    }
}

pub fn read_bvh_file(path: &Path) -> Result<RawClip> {
    let text = std::fs::read_to_string(path).map_err(|e| DfnError::io(path, e))?;
    parse_bvh(&text).map_err(|e| match e {
        DfnError::Parse { line, message } => DfnError::Format(format!("{}:{line}: {message}", path.display())),
        other => other,
    })
}

/// Serializes a clip. Numbers are written with six decimals so output is
/// byte-stable for identical inputs.
pub fn write_bvh(clip: &RawClip) -> String {
    let mut writer = BvhFrameWriter::new(&clip.skeleton, clip.frame_time);
    for f in &clip.frames {
        writer.push(f);
    }
    writer.finish()
}

/// Incremental BVH writer for streaming exports.
pub struct BvhFrameWriter {
    header: String,
    frame_time_line: String,
    body: String,
    frames: usize,
}

impl BvhFrameWriter {
    pub fn new(skeleton: &Skeleton, frame_time: f64) -> Self {
        let mut header = String::from("HIERARCHY\n");
        write_joint(&mut header, skeleton, 0, 0);
        BvhFrameWriter {
            header,
            frame_time_line: format!("Frame Time: {frame_time:.8}\n"),
            body: String::new(),
            frames: 0,
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        let line: Vec<String> = values.iter().map(|v| fmt_num(*v)).collect();
        self.body.push_str(&line.join(" "));
        self.body.push('\n');
        self.frames += 1;
    }

    pub fn finish(self) -> String {
        let mut out = self.header;
        let _ = write!(out, "MOTION\nFrames: {}\n", self.frames);
        out.push_str(&self.frame_time_line);
        out.push_str(&self.body);
        out
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn write_joint(out: &mut String, skeleton: &Skeleton, j: usize, depth: usize) {
    let joint = &skeleton.joints()[j];
    let pad = "  ".repeat(depth);
    let kind = if joint.parent.is_none() { "ROOT" } else { "JOINT" };
    let o = joint.offset;
    let _ = writeln!(out, "{pad}{kind} {}", joint.name);
    let _ = writeln!(out, "{pad}{{");
    let _ = writeln!(
        out,
        "{pad}  OFFSET {} {} {}",
        fmt_num(o[0]),
        fmt_num(o[1]),
        fmt_num(o[2])
    );
    let names: Vec<&str> = joint.channels.iter().map(|c| c.name()).collect();
    let _ = writeln!(out, "{pad}  CHANNELS {} {}", names.len(), names.join(" "));
    let mut has_child = false;
    for child in skeleton.children(j) {
        has_child = true;
        write_joint(out, skeleton, child, depth + 1);
    }
    if let Some(site) = joint.end_site.or(if has_child { None } else { Some([0.0; 3]) }) {
        let _ = writeln!(out, "{pad}  End Site");
        let _ = writeln!(out, "{pad}  {{");
        let _ = writeln!(
            out,
            "{pad}    OFFSET {} {} {}",
            fmt_num(site[0]),
            fmt_num(site[1]),
            fmt_num(site[2])
        );
        let _ = writeln!(out, "{pad}  }}");
    }
    let _ = writeln!(out, "{pad}}}");
}
