//! Prompt manager: turns the task description, instruction, history, map,
//! supplementary places, previous plan and action space into one
//! system/user message pair.
//!
//! User message sections always appear in this order:
//!
//! ```text
//! Image 0: <Img0> Image 1: <Img1> ...   (one-stage only)
//! Instruction: ...
//! History: ...
//! Trajectory: Place 0 1
//! Map:
//! Place 0 is connected with Places 1, 2
//! Supplementary Info: ...
//! Previous Planning:
//! ...
//! Surroundings: ...                      (REVERIE only)
//! Action options (step t):
//! A. stop
//! B. go forward to Place 1: ...
//! <output format reminder>
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::env::{Candidate, DirectionLabel, ObservationAnnotation};
use crate::topomap::{PlaceId, TopoMap};

/// History text before the first move.
pub const INITIAL_HISTORY: &str = "The navigation has just begun, with no history";
/// Previous-planning text before the first reply.
pub const INITIAL_PLANNING: &str = "Navigation has just started, with no planning yet";
/// Move options are labelled B..=Z.
pub const MAX_MOVE_OPTIONS: usize = 25;
/// Default soft limit on user message length, in characters.
pub const DEFAULT_PROMPT_BUDGET: usize = 4000;

pub const OUTPUT_FORMAT_REMINDER: &str = "Answer in exactly three tagged parts:\n\
Thought: your reasoning about the current situation\n\
New Planning: your updated multi-step plan over the map places\n\
Action: the single letter label of the chosen option, e.g. \"Action: B\"";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("{0} navigable candidates exceed the {MAX_MOVE_OPTIONS} available option labels")]
    TooManyCandidates(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    /// Fine-grained step-by-step instructions.
    #[serde(rename = "R2R")]
    R2R,
    /// High-level "find the object" instructions.
    #[serde(rename = "REVERIE")]
    Reverie,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::R2R => "R2R",
            Dataset::Reverie => "REVERIE",
        }
    }
}

/// Whether observations reach the model as images (one-stage) or as
/// caption plus object list (two-stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Mode {
    OneStage,
    #[default]
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskStyle {
    pub dataset: Dataset,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    /// Bound to `<Img0>`, `<Img1>`, ... in the user text.
    pub image_refs: Vec<String>,
}

impl PromptBundle {
    /// Plain-text dump used for golden files and `mapnav prompt`.
    pub fn render_dump(&self) -> String {
        let mut s = String::new();
        s.push_str("[system]\n");
        s.push_str(&self.system_text);
        s.push_str("\n[user]\n");
        s.push_str(&self.user_text);
        s.push_str("\n[images]\n");
        for (i, r) in self.image_refs.iter().enumerate() {
            let _ = writeln!(s, "Image {i}: {r}");
        }
        s
    }

    /// Logs a warning when the user message exceeds `budget` characters.
    pub fn check_budget(&self, budget: usize) -> bool {
        let len = self.user_text.chars().count();
        if len > budget {
            log::warn!("user prompt is {len} characters, over the {budget} character budget");
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptionKind {
    Stop,
    Move,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOption {
    pub label: char,
    pub kind: OptionKind,
    pub place_id: Option<PlaceId>,
    pub direction: Option<DirectionLabel>,
    /// Rendered observation, empty for stop.
    pub obs_text: String,
    /// Option text without its label, as recorded in the history.
    pub history_text: String,
}

impl ActionOption {
    pub fn stop() -> Self {
        ActionOption {
            label: 'A',
            kind: OptionKind::Stop,
            place_id: None,
            direction: None,
            obs_text: String::new(),
            history_text: "stop".into(),
        }
    }
}

/// Renders `<caption>, which also includes <objects>` or, with an image
/// index, `which is corresponding to Image k`.
pub fn format_observation(obs: &ObservationAnnotation, image_index: Option<usize>) -> String {
    match image_index {
        Some(k) => format!("which is corresponding to Image {k}"),
        None => format!("<{}>, which also includes <{}>", obs.caption, obs.objects.join(", ")),
    }
}

/// Renders observations for one prompt, numbering attached images in order
/// of first mention.
#[derive(Debug, Clone)]
pub struct ObservationFormatter {
    mode: Mode,
    images: Vec<String>,
}

impl ObservationFormatter {
    pub fn new(mode: Mode) -> Self {
        ObservationFormatter { mode, images: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// `Place 3: <caption>, which also includes <...>` or
    /// `Place 3 which is corresponding to Image 0`. One-stage observations
    /// without an image fall back to the caption form.
    pub fn place(&mut self, place: PlaceId, obs: &ObservationAnnotation) -> (String, String) {
        let image = match (self.mode, &obs.image_ref) {
            (Mode::OneStage, Some(r)) => {
                self.images.push(r.clone());
                Some(self.images.len() - 1)
            }
            _ => None,
        };
        let text = format_observation(obs, image);
        let sep = if image.is_some() { " " } else { ": " };
        (format!("Place {place}{sep}{text}"), text)
    }

    pub fn into_images(self) -> Vec<String> {
        self.images
    }
}

/// Builds `A. stop` followed by one labelled line per candidate.
pub fn format_action_space(
    cands: &[Candidate],
    map: &TopoMap,
    fmt: &mut ObservationFormatter,
) -> Result<(String, Vec<ActionOption>), PromptError> {
    if cands.len() > MAX_MOVE_OPTIONS {
        return Err(PromptError::TooManyCandidates(cands.len()));
    }
    let mut text = String::from("A. stop");
    let mut options = alloc::vec![ActionOption::stop()];
    for (i, c) in cands.iter().enumerate() {
        let label = (b'B' + i as u8) as char;
        // Candidates are always observed before the action space is built.
        let place = map.place_of(&c.neighbor).expect("candidate observed on map");
        let (place_text, obs_text) = fmt.place(place, &c.obs);
        let _ = write!(text, "\n{label}. {} {place_text}", c.direction);
        let history_text = match fmt.mode() {
            Mode::TwoStage => format!("{} {place_text}", c.direction),
            // Image indices are only valid within one prompt.
            Mode::OneStage => format!("{} Place {place}", c.direction),
        };
        options.push(ActionOption {
            label,
            kind: OptionKind::Move,
            place_id: Some(place),
            direction: Some(c.direction),
            obs_text,
            history_text,
        });
    }
    Ok((text, options))
}

/// `step 0: ..., step 1: ...`, or the initial sentinel for an empty history.
pub fn format_history<S: AsRef<str>>(past_actions: &[S]) -> String {
    if past_actions.is_empty() {
        return INITIAL_HISTORY.to_string();
    }
    past_actions
        .iter()
        .enumerate()
        .map(|(i, a)| format!("step {i}: {}", a.as_ref()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn format_supplementary(
    entries: &[(PlaceId, ObservationAnnotation)],
    fmt: &mut ObservationFormatter,
) -> String {
    if entries.is_empty() {
        return "Supplementary Info: None".into();
    }
    let mut s = String::from("Supplementary Info:");
    for (place, obs) in entries {
        let (line, _) = fmt.place(*place, obs);
        s.push('\n');
        s.push_str(&line);
    }
    s
}

pub fn format_surroundings<S: AsRef<str>>(objects: &[S]) -> String {
    if objects.is_empty() {
        return "Surroundings: None".into();
    }
    let names: Vec<&str> = objects.iter().map(AsRef::as_ref).collect();
    format!("Surroundings: {}", names.join(", "))
}

/// One-line notice appended when the previous reply had no usable label.
pub fn correction_notice(option_count: usize) -> String {
    let last = (b'A' + option_count.clamp(1, MAX_MOVE_OPTIONS + 1) as u8 - 1) as char;
    format!(
        "Your previous reply did not select a valid option. Reply again and end with one \
         line \"Action: X\" where X is one of the labels A-{last}."
    )
}

/// Fixed system message for a task style.
pub fn task_description(style: TaskStyle) -> String {
    let mut s = String::new();
    let goal = match style.dataset {
        Dataset::R2R => "follow the instruction step by step and stop at the described destination",
        Dataset::Reverie => "find the place where the object described in the instruction can be seen and stop there",
    };
    let _ = write!(
        s,
        "You are a navigation agent in an indoor environment. Places you have seen are marked \
         with numeric IDs, and you move between neighbouring places one step at a time. Your \
         task is to {goal}.\n\n"
    );

    s.push_str("At every step you receive the following inputs:\n");
    if style.mode == Mode::OneStage {
        s.push_str(
            "'Image k': the k-th image attached at the start of the message. Observations \
             elsewhere refer to these images by number.\n",
        );
    }
    s.push_str(
        "'Instruction': the navigation instruction you must carry out.\n\
         'History': the actions you have taken so far, numbered by step.\n\
         'Trajectory': the IDs of the places you have stood on, in visiting order.\n\
         'Map': for every place you have explored, the IDs of the places connected to it.\n\
         'Supplementary Info': places you have seen but cannot reach from where you stand; \
         you can get there by going back through explored places.\n\
         'Previous Planning': the multi-step plan you wrote at the previous step.\n",
    );
    if style.dataset == Dataset::Reverie {
        s.push_str("'Surroundings': the objects that can be seen around your current place.\n");
    }
    s.push_str(
        "'Action options': the moves available now. Option A stops the navigation; every other \
         option turns towards a neighbouring place and moves there. Each move names the \
         direction, the place ID and what you see in that direction.\n\n",
    );

    s.push_str("Requirements:\n");
    s.push_str(
        "1. Read the map and your trajectory to understand where you are and which places \
         remain unexplored.\n\
         2. Update your plan every step. The plan may list several places to check in order, \
         including going back to an earlier place when the current direction looks wrong.\n\
         3. Choose exactly one of the offered options.\n",
    );
    match style.dataset {
        Dataset::R2R => s.push_str(
            "4. Stop only once you are at the destination described by the instruction.\n",
        ),
        Dataset::Reverie => s.push_str(
            "4. The instruction may ask you to interact with an object (pick it up, open it, \
             clean it, and so on). Ignore any such interaction and only navigate to the place \
             where the object is.\n\
             5. Before stopping, check 'Surroundings': stop only when the target object is \
             listed there.\n",
        ),
    }
    s.push('\n');
    s.push_str(OUTPUT_FORMAT_REMINDER);
    s
}

/// Per-step inputs for [`assemble`].
#[derive(Debug, Clone, Default)]
pub struct StepPrompt<'a> {
    pub step_index: usize,
    pub instruction: &'a str,
    pub history: String,
    pub trajectory: String,
    pub connectivity: String,
    pub supplementary: String,
    /// `None` before the first reply.
    pub previous_planning: Option<&'a str>,
    /// Present for REVERIE-style tasks.
    pub surroundings: Option<String>,
    pub action_space: String,
    /// One-stage image references, bound to `<Img0>`.. in order.
    pub images: Vec<String>,
}

/// Concatenates the step sections in their fixed order.
pub fn assemble(system_text: &str, step: StepPrompt<'_>) -> PromptBundle {
    let mut u = String::new();
    if !step.images.is_empty() {
        let preamble: Vec<String> =
            (0..step.images.len()).map(|k| format!("Image {k}: <Img{k}>")).collect();
        u.push_str(&preamble.join(" "));
        u.push('\n');
    }
    let _ = writeln!(u, "Instruction: {}", step.instruction);
    let _ = writeln!(u, "History: {}", step.history);
    let _ = writeln!(u, "{}", step.trajectory);
    let _ = writeln!(u, "{}", step.connectivity);
    let _ = writeln!(u, "{}", step.supplementary);
    let _ = writeln!(
        u,
        "Previous Planning:\n{}",
        step.previous_planning.unwrap_or(INITIAL_PLANNING)
    );
    if let Some(sur) = &step.surroundings {
        let _ = writeln!(u, "{sur}");
    }
    let _ = writeln!(u, "Action options (step {}):\n{}", step.step_index, step.action_space);
    u.push_str(OUTPUT_FORMAT_REMINDER);
    PromptBundle {
        system_text: system_text.to_string(),
        user_text: u,
        image_refs: step.images,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ann(caption: &str, objects: &[&str], image: Option<&str>) -> ObservationAnnotation {
        ObservationAnnotation {
            caption: caption.into(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            image_ref: image.map(Into::into),
        }
    }

    fn cand(n: &str, d: DirectionLabel, o: ObservationAnnotation) -> Candidate {
        Candidate { neighbor: n.into(), direction: d, rel_heading: 0.0, obs: o }
    }

    #[test]
    fn observation_templates() {
        let o = ann("a room with blue walls", &["bed", "curtain", "picture"], None);
        assert_eq!(
            format_observation(&o, None),
            "<a room with blue walls>, which also includes <bed, curtain, picture>"
        );
        assert_eq!(
            format_observation(&ann("hall", &[], None), None),
            "<hall>, which also includes <>"
        );
        assert_eq!(format_observation(&o, Some(2)), "which is corresponding to Image 2");
    }

    #[test]
    fn history_templates() {
        assert_eq!(format_history::<&str>(&[]), INITIAL_HISTORY);
        assert_eq!(
            format_history(&["go forward to Place 1: <hall>"]),
            "step 0: go forward to Place 1: <hall>"
        );
        assert_eq!(format_history(&["x", "y"]), "step 0: x, step 1: y");
    }

    #[test]
    fn action_space_layouts() {
        let mut map = TopoMap::new("a");
        let mut fmt = ObservationFormatter::new(Mode::TwoStage);
        let (t, opts) = format_action_space(&[], &map, &mut fmt).unwrap();
        assert_eq!(t, "A. stop");
        assert_eq!(opts, vec![ActionOption::stop()]);

        map.observe("a", &["b", "c", "d"]).unwrap();
        let c1 = vec![cand("b", DirectionLabel::Forward, ann("hall", &["door"], None))];
        let (t, opts) = format_action_space(&c1, &map, &mut fmt).unwrap();
        assert_eq!(t, "A. stop\nB. go forward to Place 1: <hall>, which also includes <door>");
        assert_eq!(opts[1].history_text, "go forward to Place 1: <hall>, which also includes <door>");

        let c3 = vec![
            cand("b", DirectionLabel::Forward, ann("x", &[], None)),
            cand("c", DirectionLabel::Right, ann("y", &[], None)),
            cand("d", DirectionLabel::Around, ann("z", &[], None)),
        ];
        let (_, opts) = format_action_space(&c3, &map, &mut fmt).unwrap();
        let labels: String = opts.iter().map(|o| o.label).collect();
        assert_eq!(labels, "ABCD");
        assert_eq!(opts[2].place_id, Some(2));
    }

    #[test]
    fn one_stage_action_space_binds_images() {
        let mut map = TopoMap::new("a");
        map.observe("a", &["b", "c"]).unwrap();
        let mut fmt = ObservationFormatter::new(Mode::OneStage);
        let cands = vec![
            cand("b", DirectionLabel::Left, ann("x", &[], Some("b.jpg"))),
            cand("c", DirectionLabel::Around, ann("y", &[], Some("c.jpg"))),
        ];
        let (t, opts) = format_action_space(&cands, &map, &mut fmt).unwrap();
        assert_eq!(
            t,
            "A. stop\nB. turn left to Place 1 which is corresponding to Image 0\n\
             C. turn around to Place 2 which is corresponding to Image 1"
        );
        assert_eq!(opts[2].history_text, "turn around to Place 2");
        assert_eq!(fmt.into_images(), vec!["b.jpg", "c.jpg"]);
    }

    #[test]
    fn too_many_candidates() {
        let names: Vec<String> = (0..26).map(|i| format!("n{i}")).collect();
        let mut map = TopoMap::new("a");
        map.observe("a", &names).unwrap();
        let cands: Vec<Candidate> = names
            .iter()
            .map(|n| cand(n, DirectionLabel::Forward, ann("x", &[], None)))
            .collect();
        let mut fmt = ObservationFormatter::new(Mode::TwoStage);
        assert_eq!(
            format_action_space(&cands, &map, &mut fmt),
            Err(PromptError::TooManyCandidates(26))
        );
        assert!(format_action_space(&cands[..25], &map, &mut fmt).is_ok());
    }

    #[test]
    fn task_descriptions() {
        let r2r = task_description(TaskStyle { dataset: Dataset::R2R, mode: Mode::TwoStage });
        for key in ["'Instruction'", "'History'", "'Map'", "'Previous Planning'", "'Action options'"] {
            assert!(r2r.contains(key), "missing {key}");
        }
        assert!(!r2r.contains("Surroundings"));
        assert!(!r2r.contains("'Image k'"));
        let rev = task_description(TaskStyle { dataset: Dataset::Reverie, mode: Mode::OneStage });
        assert!(rev.contains("Ignore any such interaction"));
        assert!(rev.contains("'Surroundings'"));
        assert!(rev.contains("'Image k'"));
        assert_eq!(rev, task_description(TaskStyle { dataset: Dataset::Reverie, mode: Mode::OneStage }));
    }

    #[test]
    fn assemble_step_zero() {
        let b = assemble(
            "SYS",
            StepPrompt {
                instruction: "walk",
                history: format_history::<&str>(&[]),
                trajectory: "Trajectory: Place 0".into(),
                connectivity: "Map:".into(),
                supplementary: "Supplementary Info: None".into(),
                action_space: "A. stop".into(),
                ..Default::default()
            },
        );
        assert!(b.user_text.contains(INITIAL_HISTORY));
        assert!(b.user_text.contains(INITIAL_PLANNING));
        assert!(!b.user_text.contains("Image 0"));
        let order = ["Instruction:", "History:", "Trajectory:", "Map:", "Supplementary Info:", "Previous Planning:", "Action options", "Answer in exactly"];
        let pos: Vec<usize> = order.iter().map(|k| b.user_text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn one_stage_preamble() {
        let b = assemble(
            "SYS",
            StepPrompt { images: vec!["x".into(), "y".into(), "z".into()], ..Default::default() },
        );
        assert!(b.user_text.starts_with("Image 0: <Img0> Image 1: <Img1> Image 2: <Img2>\n"));
        for k in 0..3 {
            assert_eq!(b.user_text.matches(&format!("Image {k}:")).count(), 1);
        }
    }

    #[test]
    fn correction_notice_names_range() {
        assert!(correction_notice(4).contains("A-D"));
        assert!(correction_notice(1).contains("A-A"));
    }
}
