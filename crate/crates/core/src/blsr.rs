//! Shot-level rally description language.
//!
//! A rally is an ordered list of shots, each carrying eight attributes
//! (player, timestamp, shot type, backhand flag, around-the-head flag, and
//! three court areas), plus rally information: the round score of both
//! players at rally start, the player who got the point, and why the rally
//! ended.
//!
//! Court areas use a 4×4 grid over one half-court including the outside
//! ring, numbered row-major 1..=16. Row 1 is nearest the net and column 1 is
//! leftmost when facing the net. The grid is mirrored about the net so both
//! sides share one numbering.
//!
//! Two on-disk forms are supported, CSV (one row per shot, rally info
//! repeated on every row) and JSONL (one rally object per line).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// CSV column order. Also the key names used in JSONL.
pub const CSV_HEADER: [&str; 15] = [
    "rally_id",
    "match_id",
    "shot_index",
    "player",
    "timestamp",
    "type",
    "back_hand",
    "around_head",
    "hit_area",
    "player_area",
    "opponent_area",
    "roundscore_A",
    "roundscore_B",
    "getpoint_player",
    "end_reason",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlayerId {
    A,
    B,
}

impl PlayerId {
    pub fn other(self) -> PlayerId {
        match self {
            PlayerId::A => PlayerId::B,
            PlayerId::B => PlayerId::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlayerId::A => "A",
            PlayerId::B => "B",
        }
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlayerId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "A" => Ok(PlayerId::A),
            "B" => Ok(PlayerId::B),
            _ => Err(()),
        }
    }
}

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            /// Position in [`Self::ALL`].
            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = ();

            fn from_str(s: &str) -> Result<Self, ()> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(()),
                }
            }
        }
    };
}

closed_enum! {
    /// The 18 stroke categories.
    ShotType {
        NetShot => "net shot",
        ReturnNet => "return net",
        Smash => "smash",
        WristSmash => "wrist smash",
        Lob => "lob",
        DefensiveReturnLob => "defensive return lob",
        Clear => "clear",
        Drive => "drive",
        DrivenFlight => "driven flight",
        BackCourtDrive => "back-court drive",
        Drop => "drop",
        PassiveDrop => "passive drop",
        Push => "push",
        Rush => "rush",
        DefensiveReturnDrive => "defensive return drive",
        CrossCourtNetShot => "cross-court net shot",
        ShortService => "short service",
        LongService => "long service",
    }
}

impl ShotType {
    pub fn is_service(self) -> bool {
        matches!(self, ShotType::ShortService | ShotType::LongService)
    }
}

closed_enum! {
    EndReason {
        In => "in",
        Out => "out",
        TouchNet => "touch net",
        NotPassOverNet => "not pass over net",
        Misjudge => "misjudge",
    }
}

/// Court grid cell, 1..=16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Area(u8);

impl Area {
    pub const COUNT: usize = 16;

    pub fn new(value: u8) -> Option<Area> {
        (1..=Self::COUNT as u8).contains(&value).then_some(Area(value))
    }

    /// Builds an area from a zero-based grid row and column (row 0 at the net).
    pub fn from_grid(row: u8, col: u8) -> Option<Area> {
        (row < 4 && col < 4).then(|| Area(row * 4 + col + 1))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based table row.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn row(self) -> u8 {
        (self.0 - 1) / 4
    }

    pub fn col(self) -> u8 {
        (self.0 - 1) % 4
    }
}

impl TryFrom<u8> for Area {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, String> {
        Area::new(value).ok_or_else(|| format!("area {value} outside 1..=16"))
    }
}

impl From<Area> for u8 {
    fn from(a: Area) -> u8 {
        a.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub player: PlayerId,
    /// Seconds from match start.
    pub timestamp: f64,
    pub shot_type: ShotType,
    pub back_hand: bool,
    pub around_head: bool,
    pub hit_area: Area,
    pub player_area: Area,
    pub opponent_area: Area,
}

/// Rally-level attributes. Scores describe the state at rally start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RallyInfo {
    pub roundscore_a: u32,
    pub roundscore_b: u32,
    pub getpoint_player: PlayerId,
    pub end_reason: EndReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rally {
    pub rally_id: String,
    pub match_id: String,
    pub shots: Vec<Shot>,
    pub info: RallyInfo,
}

impl Rally {
    pub fn first_timestamp(&self) -> f64 {
        self.shots.first().map_or(0.0, |s| s.timestamp)
    }

    pub fn last_hitter(&self) -> Option<PlayerId> {
        self.shots.last().map(|s| s.player)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rallies: Vec<Rally>,
    /// Match ids in order of first appearance.
    pub matches: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from rallies, deriving the match list and putting
    /// rallies in canonical order (by match, then first timestamp).
    pub fn from_rallies(mut rallies: Vec<Rally>) -> Dataset {
        let mut matches: Vec<String> = Vec::new();
        for r in &rallies {
            if !matches.contains(&r.match_id) {
                matches.push(r.match_id.clone());
            }
        }
        let pos: HashMap<&str, usize> = matches
            .iter()
            .enumerate()
            .map(|(i, m)| (m.as_str(), i))
            .collect();
        let mut keyed: Vec<(usize, Rally)> = rallies
            .drain(..)
            .map(|r| (pos[r.match_id.as_str()], r))
            .collect();
        keyed.sort_by(|(ma, a), (mb, b)| {
            ma.cmp(mb)
                .then(a.first_timestamp().total_cmp(&b.first_timestamp()))
        });
        Dataset {
            rallies: keyed.into_iter().map(|(_, r)| r).collect(),
            matches,
        }
    }

    /// Restricts the dataset to the given matches, keeping canonical order.
    pub fn subset(&self, match_ids: &[String]) -> Dataset {
        Dataset {
            rallies: self
                .rallies
                .iter()
                .filter(|r| match_ids.contains(&r.match_id))
                .cloned()
                .collect(),
            matches: self
                .matches
                .iter()
                .filter(|m| match_ids.contains(m))
                .cloned()
                .collect(),
        }
    }
}

/// Round scores at rally start: everything about the rally info that is
/// known before the rally is played.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreContext {
    pub roundscore_a: u32,
    pub roundscore_b: u32,
}

/// A learning example: the shots and pre-rally context of one rally, and
/// whether the target player won it. End reason and point winner are not
/// carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub rally_id: String,
    pub match_id: String,
    pub shots: Vec<Shot>,
    pub context: ScoreContext,
    /// Winners of the earlier rallies of the same game, oldest first.
    pub prior_winners: Vec<PlayerId>,
    pub target: PlayerId,
    pub label: bool,
}

impl Instance {
    pub fn y(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

/// Turns a rally into a learning instance for `target`, with no history.
pub fn strip_outcome(rally: &Rally, target: PlayerId) -> Instance {
    Instance {
        rally_id: rally.rally_id.clone(),
        match_id: rally.match_id.clone(),
        shots: rally.shots.clone(),
        context: ScoreContext {
            roundscore_a: rally.info.roundscore_a,
            roundscore_b: rally.info.roundscore_b,
        },
        prior_winners: Vec::new(),
        target,
        label: rally.info.getpoint_player == target,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceFilter {
    /// Keep rallies that fail validation.
    pub keep_invalid: bool,
    /// Exclude rallies that ended on a misjudgement.
    pub drop_misjudge: bool,
}

/// Builds instances for every admitted rally, attaching the winners of the
/// earlier rallies of the same game. A game starts at a 0-0 score. Filtered
/// rallies still count towards the history of later ones.
pub fn build_instances(d: &Dataset, target: PlayerId, filter: InstanceFilter) -> Vec<Instance> {
    let mut out = Vec::with_capacity(d.rallies.len());
    let mut history: HashMap<&str, Vec<PlayerId>> = HashMap::new();
    for rally in &d.rallies {
        let hist = history.entry(rally.match_id.as_str()).or_default();
        if rally.info.roundscore_a == 0 && rally.info.roundscore_b == 0 {
            hist.clear();
        }
        let admitted = (filter.keep_invalid || validate_rally(rally).is_empty())
            && !(filter.drop_misjudge && rally.info.end_reason == EndReason::Misjudge);
        if admitted {
            let mut inst = strip_outcome(rally, target);
            inst.prior_winners = hist.clone();
            out.push(inst);
        }
        hist.push(rally.info.getpoint_player);
    }
    out
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A broken rally invariant. Shot indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Violation {
    EmptyRally,
    NegativeTimestamp(usize),
    TimestampOrder(usize),
    Alternation(usize),
    FirstShotNotService(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyRally => write!(f, "rally has no shots"),
            Violation::NegativeTimestamp(i) => write!(f, "shot {i}: negative timestamp"),
            Violation::TimestampOrder(i) => write!(f, "shot {i}: timestamp earlier than previous shot"),
            Violation::Alternation(i) => write!(f, "shot {i}: same player as previous shot"),
            Violation::FirstShotNotService(i) => write!(f, "shot {i}: first shot is not a service"),
        }
    }
}

pub fn validate_rally(r: &Rally) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(first) = r.shots.first() else {
        out.push(Violation::EmptyRally);
        return out;
    };
    if !first.shot_type.is_service() {
        out.push(Violation::FirstShotNotService(1));
    }
    for (i, shot) in r.shots.iter().enumerate() {
        if !(shot.timestamp >= 0.0) {
            out.push(Violation::NegativeTimestamp(i + 1));
        }
        if i > 0 {
            let prev = &r.shots[i - 1];
            if shot.timestamp < prev.timestamp {
                out.push(Violation::TimestampOrder(i + 1));
            }
            if shot.player == prev.player {
                out.push(Violation::Alternation(i + 1));
            }
        }
    }
    out
}

/// Violations for every rally of a dataset, in dataset order.
pub fn validate_dataset(d: &Dataset) -> Vec<(String, Violation)> {
    d.rallies
        .iter()
        .flat_map(|r| {
            validate_rally(r)
                .into_iter()
                .map(move |v| (r.rally_id.clone(), v))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Parsing and serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!("unknown format {other:?}, expected csv or jsonl")),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &std::path::Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownShotType(String),
    UnknownEndReason(String),
    AreaOutOfRange(String),
    MissingField,
    DuplicateShotIndex(u32),
    InvalidValue(String),
    InconsistentRallyInfo,
    Syntax(String),
}

/// Parse failure, located by 1-based line number and field name.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {row}, field `{field}`: {kind}")]
pub struct ParseError {
    pub row: u64,
    pub field: String,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::UnknownShotType(s) => write!(f, "unknown shot type {s:?}"),
            ParseErrorKind::UnknownEndReason(s) => write!(f, "unknown end reason {s:?}"),
            ParseErrorKind::AreaOutOfRange(s) => write!(f, "area {s:?} outside 1..=16"),
            ParseErrorKind::MissingField => write!(f, "missing value"),
            ParseErrorKind::DuplicateShotIndex(i) => write!(f, "duplicate shot index {i}"),
            ParseErrorKind::InvalidValue(s) => write!(f, "invalid value {s:?}"),
            ParseErrorKind::InconsistentRallyInfo => {
                write!(f, "rally information differs from an earlier row of the same rally")
            }
            ParseErrorKind::Syntax(s) => write!(f, "{s}"),
        }
    }
}

fn err(row: u64, field: &str, kind: ParseErrorKind) -> ParseError {
    ParseError {
        row,
        field: field.to_string(),
        kind,
    }
}

/// Source-agnostic access to one record's fields.
trait FieldSource {
    fn row(&self) -> u64;
    /// Raw text of a field, `None` if absent or empty.
    fn text(&self, field: &str) -> Option<String>;

    fn required(&self, field: &str) -> Result<String, ParseError> {
        self.text(field)
            .ok_or_else(|| err(self.row(), field, ParseErrorKind::MissingField))
    }

    fn string(&self, field: &str) -> Result<String, ParseError> {
        self.required(field)
    }

    fn uint(&self, field: &str) -> Result<u32, ParseError> {
        let raw = self.required(field)?;
        raw.parse()
            .map_err(|_| err(self.row(), field, ParseErrorKind::InvalidValue(raw)))
    }

    fn real(&self, field: &str) -> Result<f64, ParseError> {
        let raw = self.required(field)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(self.row(), field, ParseErrorKind::InvalidValue(raw))),
        }
    }

    fn flag(&self, field: &str) -> Result<bool, ParseError> {
        let raw = self.required(field)?;
        match raw.as_str() {
            "0" | "false" => Ok(false),
            "1" | "true" => Ok(true),
            _ => Err(err(self.row(), field, ParseErrorKind::InvalidValue(raw))),
        }
    }

    fn player(&self, field: &str) -> Result<PlayerId, ParseError> {
        let raw = self.required(field)?;
        raw.parse()
            .map_err(|_| err(self.row(), field, ParseErrorKind::InvalidValue(raw)))
    }

    fn area(&self, field: &str) -> Result<Area, ParseError> {
        let raw = self.required(field)?;
        raw.parse::<i64>()
            .ok()
            .and_then(|v| u8::try_from(v).ok())
            .and_then(Area::new)
            .ok_or_else(|| err(self.row(), field, ParseErrorKind::AreaOutOfRange(raw)))
    }

    fn shot_type(&self, field: &str) -> Result<ShotType, ParseError> {
        let raw = self.required(field)?;
        raw.parse()
            .map_err(|_| err(self.row(), field, ParseErrorKind::UnknownShotType(raw)))
    }

    fn end_reason(&self, field: &str) -> Result<EndReason, ParseError> {
        let raw = self.required(field)?;
        raw.parse()
            .map_err(|_| err(self.row(), field, ParseErrorKind::UnknownEndReason(raw)))
    }

    fn shot(&self) -> Result<(u32, Shot), ParseError> {
        let index = self.uint("shot_index")?;
        let shot = Shot {
            player: self.player("player")?,
            timestamp: self.real("timestamp")?,
            shot_type: self.shot_type("type")?,
            back_hand: self.flag("back_hand")?,
            around_head: self.flag("around_head")?,
            hit_area: self.area("hit_area")?,
            player_area: self.area("player_area")?,
            opponent_area: self.area("opponent_area")?,
        };
        Ok((index, shot))
    }

    fn rally_info(&self) -> Result<RallyInfo, ParseError> {
        Ok(RallyInfo {
            roundscore_a: self.uint("roundscore_A")?,
            roundscore_b: self.uint("roundscore_B")?,
            getpoint_player: self.player("getpoint_player")?,
            end_reason: self.end_reason("end_reason")?,
        })
    }
}

struct CsvRow<'a> {
    line: u64,
    columns: &'a HashMap<&'static str, usize>,
    record: &'a csv::StringRecord,
}

impl FieldSource for CsvRow<'_> {
    fn row(&self) -> u64 {
        self.line
    }

    fn text(&self, field: &str) -> Option<String> {
        let idx = *self.columns.get(field)?;
        self.record
            .get(idx)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
    }
}

struct JsonObject<'a> {
    line: u64,
    object: &'a Map<String, Value>,
}

impl FieldSource for JsonObject<'_> {
    fn row(&self) -> u64 {
        self.line
    }

    fn text(&self, field: &str) -> Option<String> {
        match self.object.get(field)? {
            Value::String(s) if !s.is_empty() => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    }
}

/// Accumulates shots of one rally while reading.
struct PartialRally {
    match_id: String,
    info: RallyInfo,
    shots: Vec<(u32, Shot)>,
}

#[derive(Default)]
struct Assembler {
    order: Vec<String>,
    rallies: HashMap<String, PartialRally>,
}

impl Assembler {
    fn push(
        &mut self,
        row: u64,
        rally_id: String,
        match_id: String,
        info: RallyInfo,
        index: u32,
        shot: Shot,
    ) -> Result<(), ParseError> {
        match self.rallies.get_mut(&rally_id) {
            Some(partial) => {
                if partial.match_id != match_id {
                    return Err(err(row, "match_id", ParseErrorKind::InconsistentRallyInfo));
                }
                if partial.info != info {
                    return Err(err(row, "rally_id", ParseErrorKind::InconsistentRallyInfo));
                }
                if partial.shots.iter().any(|(i, _)| *i == index) {
                    return Err(err(row, "shot_index", ParseErrorKind::DuplicateShotIndex(index)));
                }
                partial.shots.push((index, shot));
            }
            None => {
                self.order.push(rally_id.clone());
                self.rallies.insert(
                    rally_id,
                    PartialRally {
                        match_id,
                        info,
                        shots: vec![(index, shot)],
                    },
                );
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Dataset {
        let rallies = self
            .order
            .into_iter()
            .map(|id| {
                let mut partial = self.rallies.remove(&id).expect("assembled rally");
                partial.shots.sort_by_key(|(i, _)| *i);
                Rally {
                    rally_id: id,
                    match_id: partial.match_id,
                    shots: partial.shots.into_iter().map(|(_, s)| s).collect(),
                    info: partial.info,
                }
            })
            .collect();
        Dataset::from_rallies(rallies)
    }
}

pub fn parse_dataset(text: &str, format: Format) -> Result<Dataset, ParseError> {
    match format {
        Format::Csv => parse_csv(text),
        Format::Jsonl => parse_jsonl(text),
    }
}

fn parse_csv(text: &str) -> Result<Dataset, ParseError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| err(1, "header", ParseErrorKind::Syntax(e.to_string())))?
        .clone();
    let mut columns = HashMap::new();
    for name in CSV_HEADER {
        match headers.iter().position(|h| h.trim() == name) {
            Some(idx) => {
                columns.insert(name, idx);
            }
            None => return Err(err(1, name, ParseErrorKind::MissingField)),
        }
    }

    let mut assembler = Assembler::default();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, "record", ParseErrorKind::Syntax(e.to_string()))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = CsvRow {
            line,
            columns: &columns,
            record: &record,
        };
        let rally_id = row.string("rally_id")?;
        let match_id = row.string("match_id")?;
        let (index, shot) = row.shot()?;
        let info = row.rally_info()?;
        assembler.push(line, rally_id, match_id, info, index, shot)?;
    }
    Ok(assembler.finish())
}

fn parse_jsonl(text: &str) -> Result<Dataset, ParseError> {
    let mut assembler = Assembler::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw)
            .map_err(|e| err(line, "record", ParseErrorKind::Syntax(e.to_string())))?;
        let Value::Object(object) = value else {
            return Err(err(line, "record", ParseErrorKind::Syntax("expected an object".into())));
        };
        let rally = JsonObject { line, object: &object };
        let rally_id = rally.string("rally_id")?;
        let match_id = rally.string("match_id")?;
        let info = rally.rally_info()?;
        let shots = match object.get("shots") {
            Some(Value::Array(shots)) => shots,
            _ => return Err(err(line, "shots", ParseErrorKind::MissingField)),
        };
        if shots.is_empty() {
            return Err(err(line, "shots", ParseErrorKind::MissingField));
        }
        for shot in shots {
            let Value::Object(obj) = shot else {
                return Err(err(line, "shots", ParseErrorKind::Syntax("expected shot objects".into())));
            };
            let (index, shot) = JsonObject { line, object: obj }.shot()?;
            assembler.push(line, rally_id.clone(), match_id.clone(), info.clone(), index, shot)?;
        }
    }
    Ok(assembler.finish())
}

#[derive(Serialize)]
struct ShotRecord<'a> {
    shot_index: usize,
    player: &'a str,
    timestamp: f64,
    #[serde(rename = "type")]
    shot_type: &'a str,
    back_hand: u8,
    around_head: u8,
    hit_area: u8,
    player_area: u8,
    opponent_area: u8,
}

#[derive(Serialize)]
struct RallyRecord<'a> {
    rally_id: &'a str,
    match_id: &'a str,
    #[serde(rename = "roundscore_A")]
    roundscore_a: u32,
    #[serde(rename = "roundscore_B")]
    roundscore_b: u32,
    getpoint_player: &'a str,
    end_reason: &'a str,
    shots: Vec<ShotRecord<'a>>,
}

fn shot_record(index: usize, s: &Shot) -> ShotRecord<'_> {
    ShotRecord {
        shot_index: index,
        player: s.player.as_str(),
        timestamp: s.timestamp,
        shot_type: s.shot_type.name(),
        back_hand: u8::from(s.back_hand),
        around_head: u8::from(s.around_head),
        hit_area: s.hit_area.get(),
        player_area: s.player_area.get(),
        opponent_area: s.opponent_area.get(),
    }
}

/// Writes a dataset in canonical form. Shot indices are renumbered 1..=N.
pub fn serialize_dataset(d: &Dataset, format: Format) -> String {
    match format {
        Format::Csv => serialize_csv(d),
        Format::Jsonl => serialize_jsonl(d),
    }
}

fn serialize_csv(d: &Dataset) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(CSV_HEADER).expect("in-memory write");
    for rally in &d.rallies {
        let info = &rally.info;
        for (i, shot) in rally.shots.iter().enumerate() {
            let rec = shot_record(i + 1, shot);
            writer
                .write_record([
                    rally.rally_id.as_str(),
                    rally.match_id.as_str(),
                    &rec.shot_index.to_string(),
                    rec.player,
                    &rec.timestamp.to_string(),
                    rec.shot_type,
                    &rec.back_hand.to_string(),
                    &rec.around_head.to_string(),
                    &rec.hit_area.to_string(),
                    &rec.player_area.to_string(),
                    &rec.opponent_area.to_string(),
                    &info.roundscore_a.to_string(),
                    &info.roundscore_b.to_string(),
                    info.getpoint_player.as_str(),
                    info.end_reason.name(),
                ])
                .expect("in-memory write");
        }
    }
    let bytes = writer.into_inner().expect("in-memory flush");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

fn serialize_jsonl(d: &Dataset) -> String {
    let mut out = String::new();
    for rally in &d.rallies {
        let record = RallyRecord {
            rally_id: &rally.rally_id,
            match_id: &rally.match_id,
            roundscore_a: rally.info.roundscore_a,
            roundscore_b: rally.info.roundscore_b,
            getpoint_player: rally.info.getpoint_player.as_str(),
            end_reason: rally.info.end_reason.name(),
            shots: rally
                .shots
                .iter()
                .enumerate()
                .map(|(i, s)| shot_record(i + 1, s))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("plain record serializes"));
        out.push('\n');
    }
    out
}
