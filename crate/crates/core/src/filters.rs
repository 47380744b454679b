//! Output filtering and answer normalization.
//!
//! A [`FilterChain`] rejects answers that are malformed or obviously
//! hallucinated so their patches never win selection. [`normalize`] turns an
//! accepted answer into a canonical value used when scoring predictions
//! against ground truth.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance, in degrees, for coordinate equality.
pub const COORDINATE_TOLERANCE_DEG: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmsError {
    #[error("`{0}` is not a degrees-minutes-seconds value")]
    Malformed(String),
    #[error("minutes must be in [0, 60), got {0}")]
    Minutes(f64),
    #[error("seconds must be in [0, 60), got {0}")]
    Seconds(f64),
    #[error("conflicting sign and hemisphere in `{0}`")]
    ConflictingSign(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizeError {
    #[error(transparent)]
    Dms(#[from] DmsError),
    #[error("`{0}` is not a number")]
    NotNumeric(String),
    #[error("{kind} value {value} is out of range")]
    OutOfRange { kind: FieldKind, value: f64 },
    #[error("unknown field kind `{0}`")]
    UnknownKind(String),
    #[error("unknown filter rule `{0}`")]
    UnknownRule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Numeric,
    Latitude,
    Longitude,
    Depth,
    FreeText,
}

impl FieldKind {
    pub const ALL: [FieldKind; 5] = [
        FieldKind::Numeric,
        FieldKind::Latitude,
        FieldKind::Longitude,
        FieldKind::Depth,
        FieldKind::FreeText,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FieldKind::Numeric => "numeric",
            FieldKind::Latitude => "latitude",
            FieldKind::Longitude => "longitude",
            FieldKind::Depth => "depth",
            FieldKind::FreeText => "free-text",
        }
    }

    pub fn is_coordinate(&self) -> bool {
        matches!(self, FieldKind::Latitude | FieldKind::Longitude)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        match self {
            FieldKind::Latitude => Some((-90.0, 90.0)),
            FieldKind::Longitude => Some((-180.0, 180.0)),
            FieldKind::Depth => Some((0.0, f64::INFINITY)),
            FieldKind::Numeric | FieldKind::FreeText => None,
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldKind {
    type Err = NormalizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "numeric" | "number" => Ok(FieldKind::Numeric),
            "latitude" | "lat" => Ok(FieldKind::Latitude),
            "longitude" | "lon" | "lng" => Ok(FieldKind::Longitude),
            "depth" | "tvd" => Ok(FieldKind::Depth),
            "free-text" | "text" => Ok(FieldKind::FreeText),
            _ => Err(NormalizeError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterRule {
    /// Answer is not blank.
    Nonempty,
    /// Answer reads as a number, optionally followed by a unit.
    NonNumeric,
    /// Answer reads as a coordinate, in DMS or decimal degrees.
    DmsFormat,
    /// The parsed value lies within the bounds of the field kind.
    Range,
}

impl FilterRule {
    pub fn name(&self) -> &'static str {
        match self {
            FilterRule::Nonempty => "nonempty",
            FilterRule::NonNumeric => "non_numeric",
            FilterRule::DmsFormat => "dms_format",
            FilterRule::Range => "range",
        }
    }
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterRule {
    type Err = NormalizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "nonempty" => Ok(FilterRule::Nonempty),
            "non_numeric" => Ok(FilterRule::NonNumeric),
            "dms_format" => Ok(FilterRule::DmsFormat),
            "range" => Ok(FilterRule::Range),
            other => Err(NormalizeError::UnknownRule(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterChain {
    pub kind: FieldKind,
    pub rules: Vec<FilterRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterOutcome {
    Pass,
    Fail(FilterRule),
}

impl FilterOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, FilterOutcome::Pass)
    }
}

impl FilterChain {
    pub fn new(kind: FieldKind, rules: Vec<FilterRule>) -> Self {
        Self { kind, rules }
    }

    /// Default rules per kind: numeric-like fields must parse as numbers,
    /// coordinates must parse and fall inside the valid range.
    pub fn default_for(kind: FieldKind) -> Self {
        use FilterRule::*;
        let rules = match kind {
            FieldKind::Numeric => vec![Nonempty, NonNumeric],
            FieldKind::Depth => vec![Nonempty, NonNumeric, Range],
            FieldKind::Latitude | FieldKind::Longitude => vec![Nonempty, DmsFormat, Range],
            FieldKind::FreeText => vec![Nonempty],
        };
        Self { kind, rules }
    }

    pub fn from_names<S: AsRef<str>>(kind: FieldKind, names: &[S]) -> Result<Self, NormalizeError> {
        let rules = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { kind, rules })
    }

    pub fn apply(&self, answer: &str) -> FilterOutcome {
        apply_filters(answer, self)
    }
}

/// Runs the chain in order and stops at the first failing rule.
pub fn apply_filters(answer: &str, chain: &FilterChain) -> FilterOutcome {
    for rule in &chain.rules {
        let ok = match rule {
            FilterRule::Nonempty => !answer.trim().is_empty(),
            FilterRule::NonNumeric => parse_number(answer).is_ok(),
            FilterRule::DmsFormat => parse_coordinate(answer).is_ok(),
            FilterRule::Range => in_range(answer, chain.kind),
        };
        if !ok {
            return FilterOutcome::Fail(*rule);
        }
    }
    FilterOutcome::Pass
}

fn in_range(answer: &str, kind: FieldKind) -> bool {
    let value = if kind.is_coordinate() {
        parse_coordinate(answer).map(|c| c.degrees).ok()
    } else {
        parse_number(answer).map(|n| n.value).ok()
    };
    match (value, kind.bounds()) {
        (Some(v), Some((lo, hi))) => v >= lo && v <= hi,
        (Some(_), None) => true,
        (None, _) => kind == FieldKind::FreeText,
    }
}

/// Maps typographic quote, prime and degree variants onto `'`, `"` and `°`
/// and collapses runs of whitespace.
pub fn unify_glyphs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\u{2019}' | '\u{2018}' | '\u{2032}' | '\u{00B4}' | '`' => out.push('\''),
            '\u{201D}' | '\u{201C}' | '\u{2033}' => out.push('"'),
            '\u{00BA}' | '\u{02DA}' => out.push('\u{00B0}'),
            '\u{00A0}' => out.push(' '),
            c => out.push(c),
        }
    }
    let out = out.replace("''", "\"");
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

static DMS_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?ix)^
        (?P<hpre>[NSEW])?\s*
        (?P<sign>[+-])?\s*
        (?P<deg>\d+(?:\.\d+)?)\s*°\s*
        (?:
            (?P<min>\d+(?:\.\d+)?)\s*'\s*
            (?:(?P<sec>\d+(?:\.\d+)?)\s*"?)?
        )?
        \s*(?P<hsuf>[NSEW])?
        \s*\.?$"#,
    )
    .unwrap()
});

static DECIMAL_DEG_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?P<hpre>[NSEW])?\s*(?P<sign>[+-])?\s*(?P<num>\d+(?:\.\d+)?|\.\d+)\s*(?P<hsuf>[NSEW])?$")
        .unwrap()
});

static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"^(?P<sign>[+-])?(?P<num>\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|\.\d+)\s*(?P<unit>[A-Za-z]+\.?|'|")?$"#,
    )
    .unwrap()
});

/// Degrees-minutes-seconds components exactly as written, plus the sign.
#[derive(Debug, Clone, PartialEq)]
pub struct DmsParts {
    pub negative: bool,
    pub degrees: String,
    pub minutes: Option<String>,
    pub seconds: Option<String>,
}

impl DmsParts {
    pub fn to_degrees(&self) -> f64 {
        let d: f64 = self.degrees.parse().unwrap_or(0.0);
        let m: f64 = self.minutes.as_deref().map_or(0.0, |m| m.parse().unwrap_or(0.0));
        let s: f64 = self.seconds.as_deref().map_or(0.0, |s| s.parse().unwrap_or(0.0));
        let v = d + m / 60.0 + s / 3600.0;
        if self.negative {
            -v
        } else {
            v
        }
    }

    /// `D°M'S"` with the source digits and a leading `-` for south/west.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        if self.negative {
            out.push('-');
        }
        out.push_str(&self.degrees);
        out.push('°');
        if let Some(m) = &self.minutes {
            out.push_str(m);
            out.push('\'');
        }
        if let Some(s) = &self.seconds {
            out.push_str(s);
            out.push('"');
        }
        out
    }
}

fn hemisphere_sign(
    text: &str,
    pre: Option<&str>,
    sign: Option<&str>,
    suf: Option<&str>,
) -> Result<bool, DmsError> {
    let hemi = match (pre, suf) {
        (Some(_), Some(_)) => return Err(DmsError::ConflictingSign(text.to_string())),
        (h, None) | (None, h) => h,
    };
    let hemi_negative = hemi.map(|h| matches!(h.to_ascii_uppercase().as_str(), "S" | "W"));
    match (sign, hemi_negative) {
        (Some(_), Some(_)) => Err(DmsError::ConflictingSign(text.to_string())),
        (Some(s), None) => Ok(s == "-"),
        (None, Some(neg)) => Ok(neg),
        (None, None) => Ok(false),
    }
}

pub fn parse_dms_parts(text: &str) -> Result<DmsParts, DmsError> {
    let unified = unify_glyphs(text);
    let caps = DMS_RE
        .captures(&unified)
        .ok_or_else(|| DmsError::Malformed(text.to_string()))?;
    let get = |name: &str| caps.name(name).map(|m| m.as_str());

    let degrees = get("deg").unwrap_or_default().to_string();
    let minutes = get("min").map(str::to_string);
    let seconds = get("sec").map(str::to_string);
    // fractional units are only allowed on the last component given
    if (minutes.is_some() && degrees.contains('.'))
        || (seconds.is_some() && minutes.as_deref().is_some_and(|m| m.contains('.')))
    {
        return Err(DmsError::Malformed(text.to_string()));
    }
    if let Some(m) = minutes.as_deref().and_then(|m| m.parse::<f64>().ok()) {
        if m >= 60.0 {
            return Err(DmsError::Minutes(m));
        }
    }
    if let Some(s) = seconds.as_deref().and_then(|s| s.parse::<f64>().ok()) {
        if s >= 60.0 {
            return Err(DmsError::Seconds(s));
        }
    }
    let negative = hemisphere_sign(text, get("hpre"), get("sign"), get("hsuf"))?;
    Ok(DmsParts {
        negative,
        degrees,
        minutes,
        seconds,
    })
}

/// Decimal degrees from `D°M'S.s"`, with optional sign or N/S/E/W letter.
pub fn parse_dms(text: &str) -> Result<f64, DmsError> {
    parse_dms_parts(text).map(|p| p.to_degrees())
}

/// Renders decimal degrees as `D°MM'SS.sss"` with `seconds_decimals`
/// fractional digits; negative values carry a leading `-`.
pub fn format_dms(degrees: f64, seconds_decimals: usize) -> String {
    let scale = 10u64.pow(seconds_decimals as u32);
    let per_degree = 3600 * scale;
    let units = (degrees.abs() * per_degree as f64).round() as u64;
    let d = units / per_degree;
    let rem = units % per_degree;
    let m = rem / (60 * scale);
    let s = rem % (60 * scale);
    let (s_int, s_frac) = (s / scale, s % scale);
    let sign = if degrees < 0.0 && units > 0 { "-" } else { "" };
    if seconds_decimals == 0 {
        format!("{sign}{d}°{m:02}'{s_int:02}\"")
    } else {
        format!("{sign}{d}°{m:02}'{s_int:02}.{s_frac:0w$}\"", w = seconds_decimals)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub degrees: f64,
    /// Canonical DMS text when the source was written in DMS.
    pub dms: Option<String>,
    pub canonical: String,
}

/// Reads a coordinate written either in DMS or in decimal degrees.
pub fn parse_coordinate(text: &str) -> Result<Coordinate, DmsError> {
    let unified = unify_glyphs(text);
    if unified.contains(['°', '\'', '"']) {
        let parts = parse_dms_parts(&unified)?;
        let canonical = parts.canonical();
        return Ok(Coordinate {
            degrees: parts.to_degrees(),
            dms: Some(canonical.clone()),
            canonical,
        });
    }
    let caps = DECIMAL_DEG_RE
        .captures(&unified)
        .ok_or_else(|| DmsError::Malformed(text.to_string()))?;
    let get = |name: &str| caps.name(name).map(|m| m.as_str());
    let negative = hemisphere_sign(text, get("hpre"), get("sign"), get("hsuf"))?;
    let num = get("num").unwrap_or_default();
    let value: f64 = num.parse().map_err(|_| DmsError::Malformed(text.to_string()))?;
    let canonical = if negative { format!("-{num}") } else { num.to_string() };
    Ok(Coordinate {
        degrees: if negative { -value } else { value },
        dms: None,
        canonical,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedNumber {
    pub value: f64,
    /// Digits without thousands separators, sign kept only when negative.
    pub digits: String,
    pub unit: Option<String>,
}

fn canonical_unit(unit: &str) -> String {
    let bare = unit.trim_end_matches('.');
    match bare.to_ascii_lowercase().as_str() {
        "'" | "ft" | "feet" | "foot" => "ft".to_string(),
        "m" | "meter" | "meters" | "metre" | "metres" => "m".to_string(),
        _ => bare.to_string(),
    }
}

/// A number with optional thousands separators and trailing unit token.
pub fn parse_number(text: &str) -> Result<ParsedNumber, NormalizeError> {
    let unified = unify_glyphs(text);
    let caps = NUMBER_RE
        .captures(&unified)
        .ok_or_else(|| NormalizeError::NotNumeric(text.to_string()))?;
    let mut digits = caps["num"].replace(',', "");
    if digits.starts_with('.') {
        digits.insert(0, '0');
    }
    let negative = caps.name("sign").is_some_and(|m| m.as_str() == "-");
    if negative {
        digits.insert(0, '-');
    }
    let value: f64 = digits
        .parse()
        .map_err(|_| NormalizeError::NotNumeric(text.to_string()))?;
    Ok(ParsedNumber {
        value,
        digits,
        unit: caps.name("unit").map(|u| canonical_unit(u.as_str())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedValue {
    pub kind: FieldKind,
    pub canonical_text: String,
    /// Decimal degrees for coordinates, the bare number for numeric and
    /// depth fields.
    pub numeric_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dms: Option<String>,
}

pub fn normalize(answer: &str, kind: FieldKind) -> Result<NormalizedValue, NormalizeError> {
    match kind {
        FieldKind::Latitude | FieldKind::Longitude => {
            let c = parse_coordinate(answer)?;
            let (lo, hi) = kind.bounds().unwrap_or((f64::MIN, f64::MAX));
            if !(c.degrees >= lo && c.degrees <= hi) {
                return Err(NormalizeError::OutOfRange {
                    kind,
                    value: c.degrees,
                });
            }
            Ok(NormalizedValue {
                kind,
                canonical_text: c.canonical,
                numeric_value: Some(c.degrees),
                unit: None,
                dms: c.dms,
            })
        }
        FieldKind::Numeric | FieldKind::Depth => {
            let n = parse_number(answer)?;
            if kind == FieldKind::Depth && n.value < 0.0 {
                return Err(NormalizeError::OutOfRange {
                    kind,
                    value: n.value,
                });
            }
            let canonical_text = match &n.unit {
                Some(u) => format!("{} {u}", n.digits),
                None => n.digits.clone(),
            };
            Ok(NormalizedValue {
                kind,
                canonical_text,
                numeric_value: Some(n.value),
                unit: n.unit,
                dms: None,
            })
        }
        FieldKind::FreeText => Ok(NormalizedValue {
            kind,
            canonical_text: unify_glyphs(answer),
            numeric_value: None,
            unit: None,
            dms: None,
        }),
    }
}

/// Evaluation equality: coordinates within [`COORDINATE_TOLERANCE_DEG`],
/// numbers exactly (units only compared when both sides carry one), free
/// text by canonical string.
pub fn answers_match(predicted: &NormalizedValue, truth: &NormalizedValue) -> bool {
    match truth.kind {
        FieldKind::Latitude | FieldKind::Longitude => match (predicted.numeric_value, truth.numeric_value) {
            (Some(a), Some(b)) => (a - b).abs() <= COORDINATE_TOLERANCE_DEG,
            _ => false,
        },
        FieldKind::Numeric | FieldKind::Depth => {
            let units_agree = match (&predicted.unit, &truth.unit) {
                (Some(a), Some(b)) => a.eq_ignore_ascii_case(b),
                _ => true,
            };
            units_agree && predicted.numeric_value.is_some() && predicted.numeric_value == truth.numeric_value
        }
        FieldKind::FreeText => predicted.canonical_text == truth.canonical_text,
    }
}

/// Verdict for a raw prediction against a raw ground truth. A prediction
/// that does not normalize is wrong; a truth that does not normalize falls
/// back to free-text comparison.
pub fn check_answer(predicted: &str, truth: &str, kind: FieldKind) -> bool {
    match normalize(truth, kind) {
        Ok(t) => normalize(predicted, kind).is_ok_and(|p| answers_match(&p, &t)),
        Err(_) => unify_glyphs(predicted) == unify_glyphs(truth),
    }
}

/// Human-readable statement of [`answers_match`], embedded in reports.
pub const MATCH_RULES: &str = "coordinates: |pred - truth| <= 1e-6 deg after DMS/decimal parsing; \
numeric/depth: exact numeric equality, units compared case-insensitively only when both sides carry one; \
free-text: exact match after whitespace and quote-glyph unification";
