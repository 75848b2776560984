//! Labels, events, traces, processes, and the two composition operators.
//!
//! A label is a signature instantiated with constants from finite domains.
//! An event is a non-empty set of labels; a multi-label event represents one
//! occurrence described at several abstraction layers at once. A process is
//! a triple of alphabet, permitted events, and a prefix-closed, depth-bounded
//! behavior set. Composition is computed by exhaustive comprehension over the
//! operands' event sets, which keeps this module usable as a semantic oracle
//! for the operational layer in [`crate::machine`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

/// Depth bound applied to behavior comprehension when callers do not choose one.
pub const DEFAULT_DEPTH: usize = 4;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("event must contain at least one label")]
    EmptyEvent,
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown signature `{0}`")]
    UnknownSignature(String),
    #[error("unknown constant `{constant}` for domain `{domain}`")]
    UnknownConstant { domain: String, constant: String },
    #[error("signature `{sig}` takes {expected} arguments, got {got}")]
    ArityMismatch {
        sig: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate domain `{0}`")]
    DuplicateDomain(String),
    #[error("duplicate signature `{0}`")]
    DuplicateSignature(String),
    #[error("duplicate parameter `{param}` in signature `{sig}`")]
    DuplicateParam { sig: String, param: String },
    #[error("domain `{0}` has no constants")]
    EmptyDomain(String),
    #[error("event uses a label outside the process alphabet: {0}")]
    AlphabetViolation(String),
    #[error("trace uses an event outside the process event set")]
    TraceEventOutsideEvts,
    #[error("behavior set is not prefix-closed")]
    NotPrefixClosed,
    #[error(
        "mapping entry {entry} runs against the composition orientation: \
         sources must stay out of one operand's alphabet and targets out of \
         the other's"
    )]
    MappingOrientation { entry: String },
}

/// A finite, ordered constant pool for one parameter type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    pub name: String,
    pub constants: Vec<String>,
}

/// A named action symbol with typed parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigDecl {
    pub name: String,
    /// Parameter name paired with an index into the vocabulary's domain list.
    pub params: Vec<(String, usize)>,
}

/// The declaration context shared by every label: domains and signatures.
///
/// Declaration order is preserved for display and file round-trips, while
/// label ordering uses the alphabetical rank of signature names so that
/// results are stable under reordered declarations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    domains: Vec<Domain>,
    sigs: Vec<SigDecl>,
    ranks: Vec<u32>,
    global_names: Vec<String>,
    domain_globals: Vec<Vec<u32>>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_domain(
        &mut self,
        name: &str,
        constants: &[&str],
    ) -> Result<usize, SemanticsError> {
        if self.domains.iter().any(|d| d.name == name) {
            return Err(SemanticsError::DuplicateDomain(name.to_string()));
        }
        if constants.is_empty() {
            return Err(SemanticsError::EmptyDomain(name.to_string()));
        }
        let mut globals = Vec::with_capacity(constants.len());
        for constant in constants {
            let id = match self.global_names.iter().position(|n| n == constant) {
                Some(i) => i as u32,
                None => {
                    self.global_names.push(constant.to_string());
                    (self.global_names.len() - 1) as u32
                }
            };
            globals.push(id);
        }
        self.domains.push(Domain {
            name: name.to_string(),
            constants: constants.iter().map(|c| c.to_string()).collect(),
        });
        self.domain_globals.push(globals);
        Ok(self.domains.len() - 1)
    }

    /// The shared identity of a constant name across every domain using it.
    pub fn global_const(&self, name: &str) -> Option<u32> {
        self.global_names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn global_name(&self, global: u32) -> &str {
        &self.global_names[global as usize]
    }

    pub fn global_of(&self, domain_idx: usize, value: u16) -> u32 {
        self.domain_globals[domain_idx][value as usize]
    }

    /// Re-expresses a global constant as an index into one domain, when that
    /// domain declares the same constant name.
    pub fn global_to_domain(&self, global: u32, domain_idx: usize) -> Option<u16> {
        self.domain_globals[domain_idx]
            .iter()
            .position(|g| *g == global)
            .map(|i| i as u16)
    }

    /// The shared identity of one argument position of a label.
    pub fn arg_global(&self, label: &Label, position: usize) -> u32 {
        let (_, domain_idx) = self.sigs[label.sig as usize].params[position];
        self.global_of(domain_idx, label.args[position])
    }

    pub fn add_signature(
        &mut self,
        name: &str,
        params: &[(&str, &str)],
    ) -> Result<usize, SemanticsError> {
        if self.sigs.iter().any(|s| s.name == name) {
            return Err(SemanticsError::DuplicateSignature(name.to_string()));
        }
        let mut resolved = Vec::with_capacity(params.len());
        for (param, domain) in params {
            if resolved
                .iter()
                .any(|(p, _): &(String, usize)| p == param)
            {
                return Err(SemanticsError::DuplicateParam {
                    sig: name.to_string(),
                    param: param.to_string(),
                });
            }
            let idx = self
                .domain_index(domain)
                .ok_or_else(|| SemanticsError::UnknownDomain(domain.to_string()))?;
            resolved.push((param.to_string(), idx));
        }
        self.sigs.push(SigDecl {
            name: name.to_string(),
            params: resolved,
        });
        self.recompute_ranks();
        Ok(self.sigs.len() - 1)
    }

    fn recompute_ranks(&mut self) {
        let mut order: Vec<usize> = (0..self.sigs.len()).collect();
        order.sort_by(|&a, &b| self.sigs[a].name.cmp(&self.sigs[b].name));
        self.ranks = vec![0; self.sigs.len()];
        for (rank, sig_idx) in order.into_iter().enumerate() {
            self.ranks[sig_idx] = rank as u32;
        }
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn domain(&self, idx: usize) -> &Domain {
        &self.domains[idx]
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn sig_index(&self, name: &str) -> Option<usize> {
        self.sigs.iter().position(|s| s.name == name)
    }

    pub fn sig(&self, idx: usize) -> &SigDecl {
        &self.sigs[idx]
    }

    pub fn sigs(&self) -> &[SigDecl] {
        &self.sigs
    }

    pub fn constant_index(&self, domain_idx: usize, constant: &str) -> Option<u16> {
        self.domains[domain_idx]
            .constants
            .iter()
            .position(|c| c == constant)
            .map(|i| i as u16)
    }

    /// Builds a label from a signature name and constant names.
    pub fn label(&self, sig: &str, args: &[&str]) -> Result<Label, SemanticsError> {
        let sig_idx = self
            .sig_index(sig)
            .ok_or_else(|| SemanticsError::UnknownSignature(sig.to_string()))?;
        let decl = &self.sigs[sig_idx];
        if decl.params.len() != args.len() {
            return Err(SemanticsError::ArityMismatch {
                sig: sig.to_string(),
                expected: decl.params.len(),
                got: args.len(),
            });
        }
        let mut values = Vec::with_capacity(args.len());
        for ((_, domain_idx), arg) in decl.params.iter().zip(args) {
            let value = self.constant_index(*domain_idx, arg).ok_or_else(|| {
                SemanticsError::UnknownConstant {
                    domain: self.domains[*domain_idx].name.clone(),
                    constant: arg.to_string(),
                }
            })?;
            values.push(value);
        }
        Ok(Label {
            rank: self.ranks[sig_idx],
            sig: sig_idx as u32,
            args: values,
        })
    }

    /// Builds a label directly from resolved indices.
    pub fn label_from_indices(&self, sig_idx: usize, args: Vec<u16>) -> Label {
        debug_assert_eq!(self.sigs[sig_idx].params.len(), args.len());
        Label {
            rank: self.ranks[sig_idx],
            sig: sig_idx as u32,
            args,
        }
    }

    /// All instantiations of one signature, in canonical order.
    pub fn expand_sig(&self, sig_idx: usize) -> Vec<Label> {
        let decl = &self.sigs[sig_idx];
        let mut out = vec![Vec::new()];
        for (_, domain_idx) in &decl.params {
            let width = self.domains[*domain_idx].constants.len() as u16;
            let mut next = Vec::with_capacity(out.len() * width as usize);
            for prefix in &out {
                for value in 0..width {
                    let mut row = prefix.clone();
                    row.push(value);
                    next.push(row);
                }
            }
            out = next;
        }
        out.into_iter()
            .map(|args| self.label_from_indices(sig_idx, args))
            .collect()
    }

    /// The constant name carried by one argument position of a label.
    pub fn arg_name(&self, label: &Label, position: usize) -> &str {
        let (_, domain_idx) = self.sigs[label.sig as usize].params[position];
        &self.domains[domain_idx].constants[label.args[position] as usize]
    }

    pub fn render_label(&self, label: &Label) -> String {
        let decl = &self.sigs[label.sig as usize];
        if decl.params.is_empty() {
            return decl.name.clone();
        }
        let args: Vec<&str> = (0..decl.params.len())
            .map(|i| self.arg_name(label, i))
            .collect();
        format!("{}({})", decl.name, args.join(", "))
    }

    pub fn render_event(&self, event: &Event) -> String {
        let labels: Vec<String> = event.labels().iter().map(|l| self.render_label(l)).collect();
        format!("{{{}}}", labels.join(", "))
    }

    pub fn render_trace(&self, trace: &Trace) -> String {
        let events: Vec<String> = trace.events().iter().map(|e| self.render_event(e)).collect();
        format!("<{}>", events.join(", "))
    }
}

/// One concrete action: a signature plus a constant for each parameter.
///
/// Ordering is alphabetical signature name first, then argument constants in
/// their domains' declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Label {
    rank: u32,
    sig: u32,
    args: Vec<u16>,
}

impl Label {
    pub fn sig_index(&self) -> usize {
        self.sig as usize
    }

    pub fn args(&self) -> &[u16] {
        &self.args
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.rank, &self.args).cmp(&(other.rank, &other.args))
    }
}

/// A non-empty, finite set of labels occurring together.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event(BTreeSet<Label>);

impl Event {
    pub fn new(labels: BTreeSet<Label>) -> Result<Self, SemanticsError> {
        if labels.is_empty() {
            return Err(SemanticsError::EmptyEvent);
        }
        Ok(Event(labels))
    }

    pub fn singleton(label: Label) -> Self {
        Event(BTreeSet::from([label]))
    }

    pub fn from_labels<I: IntoIterator<Item = Label>>(labels: I) -> Result<Self, SemanticsError> {
        Self::new(labels.into_iter().collect())
    }

    pub fn labels(&self) -> &BTreeSet<Label> {
        &self.0
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.0.contains(label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The labels shared with `alphabet`; may be empty, so the result is a
    /// plain set rather than an event.
    pub fn restrict(&self, alphabet: &BTreeSet<Label>) -> BTreeSet<Label> {
        self.0.intersection(alphabet).cloned().collect()
    }

    pub fn union(&self, other: &Event) -> Event {
        Event(self.0.union(&other.0).cloned().collect())
    }
}

/// A finite sequence of events.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Trace(Vec<Event>);

impl Trace {
    pub fn empty() -> Self {
        Trace(Vec::new())
    }

    pub fn from_events(events: Vec<Event>) -> Self {
        Trace(events)
    }

    pub fn events(&self) -> &[Event] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extended(&self, event: Event) -> Trace {
        let mut events = self.0.clone();
        events.push(event);
        Trace(events)
    }

    pub fn prefix(&self, len: usize) -> Trace {
        Trace(self.0[..len].to_vec())
    }

    /// Orders traces by length first, then lexicographically; used wherever a
    /// single canonical witness has to be chosen.
    pub fn shortlex(&self, other: &Trace) -> std::cmp::Ordering {
        self.len().cmp(&other.len()).then_with(|| self.cmp(other))
    }
}

/// Keeps each event's intersection with `alphabet` and drops events that lose
/// all their labels.
pub fn project(trace: &Trace, alphabet: &BTreeSet<Label>) -> Trace {
    let mut events = Vec::new();
    for event in trace.events() {
        let kept = event.restrict(alphabet);
        if !kept.is_empty() {
            events.push(Event(kept));
        }
    }
    Trace(events)
}

/// The set of distinct events occurring in a trace.
pub fn events_of(trace: &Trace) -> BTreeSet<Event> {
    trace.events().iter().cloned().collect()
}

/// A partial function from labels to labels; an entry `a -> b` forces every
/// event containing `a` to carry `b` as well.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Mapping(BTreeMap<Label, Label>);

impl Mapping {
    pub fn empty() -> Self {
        Mapping(BTreeMap::new())
    }

    pub fn from_pairs<I: IntoIterator<Item = (Label, Label)>>(pairs: I) -> Self {
        Mapping(pairs.into_iter().collect())
    }

    pub fn insert(&mut self, source: Label, target: Label) {
        self.0.insert(source, target);
    }

    pub fn get(&self, source: &Label) -> Option<&Label> {
        self.0.get(source)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Label, &Label)> {
        self.0.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut lines = String::new();
        for (source, target) in &self.0 {
            lines.push_str(&format!(
                "{} -> {}\n",
                vocab.render_label(source),
                vocab.render_label(target)
            ));
        }
        lines
    }
}

/// Alphabet, permitted events, and a prefix-closed bounded behavior set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Process {
    alphabet: BTreeSet<Label>,
    evts: BTreeSet<Event>,
    beh: BTreeSet<Trace>,
}

impl Process {
    pub fn new(
        alphabet: BTreeSet<Label>,
        evts: BTreeSet<Event>,
        beh: BTreeSet<Trace>,
    ) -> Result<Self, SemanticsError> {
        for event in &evts {
            for label in event.labels() {
                if !alphabet.contains(label) {
                    return Err(SemanticsError::AlphabetViolation(format!("{label:?}")));
                }
            }
        }
        for trace in &beh {
            for event in trace.events() {
                if !evts.contains(event) {
                    return Err(SemanticsError::TraceEventOutsideEvts);
                }
            }
        }
        if !is_prefix_closed(&beh) {
            return Err(SemanticsError::NotPrefixClosed);
        }
        Ok(Process { alphabet, evts, beh })
    }

    pub fn alphabet(&self) -> &BTreeSet<Label> {
        &self.alphabet
    }

    pub fn evts(&self) -> &BTreeSet<Event> {
        &self.evts
    }

    pub fn beh(&self) -> &BTreeSet<Trace> {
        &self.beh
    }

    /// Length of the longest trace currently materialized.
    pub fn depth(&self) -> usize {
        self.beh.iter().map(Trace::len).max().unwrap_or(0)
    }
}

/// True iff the empty trace is present and every one-event truncation of a
/// member is a member.
pub fn is_prefix_closed(beh: &BTreeSet<Trace>) -> bool {
    if !beh.contains(&Trace::empty()) {
        return false;
    }
    beh.iter()
        .filter(|t| !t.is_empty())
        .all(|t| beh.contains(&t.prefix(t.len() - 1)))
}

/// The synchronization condition of plain composition: the event is private
/// to one operand, or it carries at least one label both operands declare.
pub fn cond(event: &Event, alpha_p: &BTreeSet<Label>, alpha_q: &BTreeSet<Label>) -> bool {
    let private_p = event.labels().iter().all(|l| alpha_p.contains(l) && !alpha_q.contains(l));
    let private_q = event.labels().iter().all(|l| alpha_q.contains(l) && !alpha_p.contains(l));
    let shared = event
        .labels()
        .iter()
        .any(|l| alpha_p.contains(l) && alpha_q.contains(l));
    private_p || private_q || shared
}

/// True iff every mapped label in the event is accompanied by its image.
pub fn condmap(event: &Event, mapping: &Mapping) -> bool {
    event
        .labels()
        .iter()
        .all(|label| mapping.get(label).map_or(true, |image| event.contains(image)))
}

/// The synchronization condition of mapping composition: `cond`, or a mapped
/// pair of labels straddling the two alphabets inside the event.
pub fn cond_prime(
    event: &Event,
    alpha_p: &BTreeSet<Label>,
    alpha_q: &BTreeSet<Label>,
    mapping: &Mapping,
) -> bool {
    if cond(event, alpha_p, alpha_q) {
        return true;
    }
    event.labels().iter().any(|a| {
        event.labels().iter().any(|b| {
            let straddles = (alpha_p.contains(a) && alpha_q.contains(b))
                || (alpha_q.contains(a) && alpha_p.contains(b));
            straddles
                && (mapping.get(a) == Some(b) || mapping.get(b) == Some(a))
        })
    })
}

fn operand_accepts(part: &BTreeSet<Label>, evts: &BTreeSet<Event>) -> bool {
    part.is_empty() || evts.contains(&Event(part.clone()))
}

fn composite_events<F>(p: &Process, q: &Process, admit: F) -> BTreeSet<Event>
where
    F: Fn(&Event) -> bool,
{
    let mut lefts: Vec<Option<&Event>> = vec![None];
    lefts.extend(p.evts.iter().map(Some));
    let mut rights: Vec<Option<&Event>> = vec![None];
    rights.extend(q.evts.iter().map(Some));

    let mut out = BTreeSet::new();
    for left in &lefts {
        for right in &rights {
            let mut labels = BTreeSet::new();
            if let Some(e) = left {
                labels.extend(e.labels().iter().cloned());
            }
            if let Some(e) = right {
                labels.extend(e.labels().iter().cloned());
            }
            if labels.is_empty() {
                continue;
            }
            let candidate = Event(labels);
            if out.contains(&candidate) {
                continue;
            }
            if !operand_accepts(&candidate.restrict(&p.alphabet), &p.evts) {
                continue;
            }
            if !operand_accepts(&candidate.restrict(&q.alphabet), &q.evts) {
                continue;
            }
            if admit(&candidate) {
                out.insert(candidate);
            }
        }
    }
    out
}

fn composite_behavior(
    p: &Process,
    q: &Process,
    evts: &BTreeSet<Event>,
    depth: usize,
) -> BTreeSet<Trace> {
    let mut beh = BTreeSet::from([Trace::empty()]);
    let mut frontier = vec![(Trace::empty(), Trace::empty(), Trace::empty())];
    for _ in 0..depth {
        let mut next = Vec::new();
        for (trace, proj_p, proj_q) in &frontier {
            for event in evts {
                let kept_p = event.restrict(&p.alphabet);
                let kept_q = event.restrict(&q.alphabet);
                let new_p = if kept_p.is_empty() {
                    proj_p.clone()
                } else {
                    proj_p.extended(Event(kept_p))
                };
                if !p.beh.contains(&new_p) {
                    continue;
                }
                let new_q = if kept_q.is_empty() {
                    proj_q.clone()
                } else {
                    proj_q.extended(Event(kept_q))
                };
                if !q.beh.contains(&new_q) {
                    continue;
                }
                let extended = trace.extended(event.clone());
                beh.insert(extended.clone());
                next.push((extended, new_p, new_q));
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    beh
}

/// Plain parallel composition: events synchronize through shared labels, and
/// the composite behavior is every event sequence (up to `depth`) whose
/// projections are behaviors of the operands.
pub fn parallel_compose(p: &Process, q: &Process, depth: usize) -> Process {
    let alphabet: BTreeSet<Label> = p.alphabet.union(&q.alphabet).cloned().collect();
    let evts = composite_events(p, q, |e| cond(e, &p.alphabet, &q.alphabet));
    let beh = composite_behavior(p, q, &evts, depth);
    Process { alphabet, evts, beh }
}

fn mapping_oriented(p: &Process, q: &Process, mapping: &Mapping) -> bool {
    let forward = mapping
        .iter()
        .all(|(a, b)| !q.alphabet.contains(a) && !p.alphabet.contains(b));
    let backward = mapping
        .iter()
        .all(|(a, b)| !p.alphabet.contains(a) && !q.alphabet.contains(b));
    forward || backward
}

/// Mapping composition: like [`parallel_compose`], but events may also
/// synchronize through mapped label pairs, and every event containing a
/// mapped label must carry its image.
///
/// The mapping must keep one orientation across the boundary: no source may
/// sit in one operand's alphabet while any target sits in the other
/// operand's. Entries touching neither alphabet are allowed and stay inert.
pub fn mapping_compose(
    p: &Process,
    q: &Process,
    mapping: &Mapping,
    depth: usize,
) -> Result<Process, SemanticsError> {
    if !mapping_oriented(p, q, mapping) {
        let entry = mapping
            .iter()
            .find(|(a, b)| {
                (q.alphabet.contains(a) && p.alphabet.contains(b))
                    || (p.alphabet.contains(a) && q.alphabet.contains(b))
            })
            .map(|(a, b)| format!("{a:?} -> {b:?}"))
            .unwrap_or_default();
        return Err(SemanticsError::MappingOrientation { entry });
    }
    let alphabet: BTreeSet<Label> = p.alphabet.union(&q.alphabet).cloned().collect();
    let evts = composite_events(p, q, |e| {
        cond_prime(e, &p.alphabet, &q.alphabet, mapping) && condmap(e, mapping)
    });
    let beh = composite_behavior(p, q, &evts, depth);
    Ok(Process { alphabet, evts, beh })
}

/// Left-associative composition of a part list under one shared mapping.
///
/// Each mapping entry becomes active at the first boundary whose two sides
/// separate its source from its target; afterwards it is carried implicitly
/// by the accumulated event set, so later boundaries compose without it.
/// Entries whose endpoints never straddle a boundary stay inert.
pub fn compose_chain(
    parts: &[Process],
    mapping: &Mapping,
    depth: usize,
) -> Result<Process, SemanticsError> {
    assert!(!parts.is_empty(), "composition needs at least one process");
    let mut acc = parts[0].clone();
    let mut activated: BTreeSet<Label> = BTreeSet::new();
    for part in &parts[1..] {
        let mut boundary = Mapping::empty();
        for (a, b) in mapping.iter() {
            if activated.contains(a) {
                continue;
            }
            let forward = acc.alphabet.contains(a) && part.alphabet.contains(b);
            let backward = part.alphabet.contains(a) && acc.alphabet.contains(b);
            if forward || backward {
                boundary.insert(a.clone(), b.clone());
            }
        }
        for (a, _) in boundary.iter() {
            activated.insert(a.clone());
        }
        acc = if boundary.is_empty() {
            parallel_compose(&acc, part, depth)
        } else {
            mapping_compose(&acc, part, &boundary, depth)?
        };
    }
    Ok(acc)
}

/// Convenience alias used by modules that carry the vocabulary around.
pub type SharedVocabulary = Arc<Vocabulary>;

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_vocab(names: &[&str]) -> Vocabulary {
        let mut vocab = Vocabulary::new();
        for name in names {
            vocab.add_signature(name, &[]).unwrap();
        }
        vocab
    }

    fn lab(vocab: &Vocabulary, name: &str) -> Label {
        vocab.label(name, &[]).unwrap()
    }

    fn ev(vocab: &Vocabulary, names: &[&str]) -> Event {
        Event::from_labels(names.iter().map(|n| lab(vocab, n))).unwrap()
    }

    fn tr(vocab: &Vocabulary, events: &[&[&str]]) -> Trace {
        Trace::from_events(events.iter().map(|e| ev(vocab, e)).collect())
    }

    fn alpha(vocab: &Vocabulary, names: &[&str]) -> BTreeSet<Label> {
        names.iter().map(|n| lab(vocab, n)).collect()
    }

    fn closure(traces: &[Trace]) -> BTreeSet<Trace> {
        let mut beh = BTreeSet::from([Trace::empty()]);
        for trace in traces {
            for len in 1..=trace.len() {
                beh.insert(trace.prefix(len));
            }
        }
        beh
    }

    fn process(vocab: &Vocabulary, labels: &[&str], traces: &[Trace]) -> Process {
        let beh = closure(traces);
        let evts: BTreeSet<Event> = beh.iter().flat_map(|t| events_of(t)).collect();
        Process::new(alpha(vocab, labels), evts, beh).unwrap()
    }

    #[test]
    fn projection_keeps_intersections_and_drops_emptied_events() {
        let vocab = flat_vocab(&["a", "b", "c"]);
        let trace = tr(&vocab, &[&["a"], &["a", "c"], &["b"]]);
        assert_eq!(
            project(&trace, &alpha(&vocab, &["a", "b"])),
            tr(&vocab, &[&["a"], &["a"], &["b"]])
        );
        assert_eq!(
            project(&trace, &alpha(&vocab, &["b", "c"])),
            tr(&vocab, &[&["c"], &["b"]])
        );
    }

    #[test]
    fn projection_of_empty_trace_is_empty() {
        let vocab = flat_vocab(&["a"]);
        assert_eq!(project(&Trace::empty(), &alpha(&vocab, &["a"])), Trace::empty());
    }

    #[test]
    fn projection_onto_full_alphabet_is_identity() {
        let vocab = flat_vocab(&["a", "b", "c"]);
        let trace = tr(&vocab, &[&["a", "b"], &["c"], &["a"]]);
        assert_eq!(project(&trace, &alpha(&vocab, &["a", "b", "c"])), trace);
    }

    #[test]
    fn events_of_collects_distinct_events() {
        let vocab = flat_vocab(&["a", "b", "c"]);
        let trace = tr(&vocab, &[&["a"], &["a", "c"], &["b"]]);
        let expected: BTreeSet<Event> = [
            ev(&vocab, &["a"]),
            ev(&vocab, &["a", "c"]),
            ev(&vocab, &["b"]),
        ]
        .into_iter()
        .collect();
        assert_eq!(events_of(&trace), expected);
        assert!(events_of(&Trace::empty()).is_empty());
        let repeated = tr(&vocab, &[&["a"], &["a"]]);
        assert_eq!(events_of(&repeated).len(), 1);
    }

    #[test]
    fn empty_events_are_rejected() {
        assert!(matches!(
            Event::new(BTreeSet::new()),
            Err(SemanticsError::EmptyEvent)
        ));
    }

    #[test]
    fn cond_requires_privacy_or_a_shared_label() {
        let vocab = flat_vocab(&["a", "b", "q", "x"]);
        let ap = alpha(&vocab, &["a", "b", "q"]);
        let aq = alpha(&vocab, &["x", "q"]);
        assert!(cond(&ev(&vocab, &["a", "x", "q"]), &ap, &aq));
        assert!(!cond(&ev(&vocab, &["a", "x"]), &ap, &aq));
        assert!(cond(
            &ev(&vocab, &["a"]),
            &alpha(&vocab, &["a"]),
            &alpha(&vocab, &["x"])
        ));
    }

    #[test]
    fn condmap_forces_images_into_events() {
        let vocab = flat_vocab(&["a", "x"]);
        let mapping = Mapping::from_pairs([(lab(&vocab, "a"), lab(&vocab, "x"))]);
        assert!(!condmap(&ev(&vocab, &["a"]), &mapping));
        assert!(condmap(&ev(&vocab, &["a", "x"]), &mapping));
        assert!(condmap(&ev(&vocab, &["a"]), &Mapping::empty()));
    }

    #[test]
    fn cond_prime_adds_the_mapped_pair_disjunct() {
        let vocab = flat_vocab(&["a", "b", "x", "y"]);
        let ap = alpha(&vocab, &["a", "b"]);
        let aq = alpha(&vocab, &["x", "y"]);
        let mapping = Mapping::from_pairs([(lab(&vocab, "a"), lab(&vocab, "x"))]);
        assert!(cond_prime(&ev(&vocab, &["a", "x"]), &ap, &aq, &mapping));
        assert!(!cond_prime(&ev(&vocab, &["a", "x"]), &ap, &aq, &Mapping::empty()));
        assert!(cond_prime(&ev(&vocab, &["x"]), &ap, &aq, &mapping));
    }

    #[test]
    fn parallel_composition_synchronizes_on_shared_labels() {
        let vocab = flat_vocab(&["a", "b", "q", "x"]);
        let p = process(
            &vocab,
            &["a", "b", "q"],
            &[tr(&vocab, &[&["a"], &["a", "q"], &["b"]])],
        );
        let q = process(&vocab, &["x", "q"], &[tr(&vocab, &[&["x"], &["x", "q"]])]);
        let composed = parallel_compose(&p, &q, 4);

        assert!(composed
            .beh()
            .contains(&tr(&vocab, &[&["a"], &["x"], &["a", "x", "q"], &["b"]])));
        assert!(!composed
            .beh()
            .contains(&tr(&vocab, &[&["a", "x"], &["a", "x", "q"], &["b"]])));
        assert!(!composed.evts().contains(&ev(&vocab, &["a", "x"])));
        assert!(composed.evts().contains(&ev(&vocab, &["a", "x", "q"])));
    }

    #[test]
    fn mapping_composition_lets_mapped_labels_ride_and_blocks_bare_sources() {
        let vocab = flat_vocab(&["a", "b", "x", "y"]);
        let p = process(&vocab, &["a", "b"], &[tr(&vocab, &[&["b"], &["a"]])]);
        let q = process(&vocab, &["x", "y"], &[tr(&vocab, &[&["x"], &["y"], &["x"]])]);
        let mapping = Mapping::from_pairs([(lab(&vocab, "a"), lab(&vocab, "x"))]);
        let composed = mapping_compose(&p, &q, &mapping, 5).unwrap();

        assert!(!composed
            .beh()
            .contains(&tr(&vocab, &[&["b"], &["a"], &["x"], &["y"], &["x"]])));
        assert!(composed
            .beh()
            .contains(&tr(&vocab, &[&["b"], &["a", "x"], &["y"], &["x"]])));
        assert!(composed
            .beh()
            .contains(&tr(&vocab, &[&["b"], &["x"], &["y"], &["a", "x"]])));
        assert!(!composed.evts().contains(&ev(&vocab, &["a"])));
    }

    #[test]
    fn empty_mapping_composition_equals_parallel_composition() {
        let vocab = flat_vocab(&["a", "b", "q", "x"]);
        let p = process(
            &vocab,
            &["a", "b", "q"],
            &[tr(&vocab, &[&["a"], &["a", "q"], &["b"]])],
        );
        let q = process(&vocab, &["x", "q"], &[tr(&vocab, &[&["x"], &["x", "q"]])]);
        let plain = parallel_compose(&p, &q, 4);
        let mapped = mapping_compose(&p, &q, &Mapping::empty(), 4).unwrap();
        assert_eq!(plain, mapped);
    }

    #[test]
    fn parallel_composition_is_not_associative() {
        let vocab = flat_vocab(&["b", "c"]);
        let p = process(&vocab, &["b", "c"], &[tr(&vocab, &[&["b", "c"]])]);
        let q = process(&vocab, &["b"], &[tr(&vocab, &[&["b"]])]);
        let r = process(&vocab, &["c"], &[tr(&vocab, &[&["c"]])]);

        let left = parallel_compose(&parallel_compose(&p, &q, 4), &r, 4);
        assert_eq!(left.beh(), &closure(&[tr(&vocab, &[&["b", "c"]])]));

        let qr = parallel_compose(&q, &r, 4);
        assert_eq!(
            qr.beh(),
            &closure(&[tr(&vocab, &[&["b"], &["c"]]), tr(&vocab, &[&["c"], &["b"]])])
        );
        let right = parallel_compose(&p, &qr, 4);
        assert_eq!(right.beh(), &BTreeSet::from([Trace::empty()]));
        assert_ne!(left.beh(), right.beh());
    }

    #[test]
    fn mapping_composition_is_not_associative() {
        let vocab = flat_vocab(&["a", "b", "c"]);
        let p = process(&vocab, &["a"], &[tr(&vocab, &[&["a"]])]);
        let q = process(&vocab, &["b"], &[tr(&vocab, &[&["b"]])]);
        let r = process(&vocab, &["c"], &[tr(&vocab, &[&["c"]])]);
        let m1 = Mapping::from_pairs([(lab(&vocab, "a"), lab(&vocab, "b"))]);
        let m2 = Mapping::from_pairs([(lab(&vocab, "a"), lab(&vocab, "c"))]);

        let left = mapping_compose(&mapping_compose(&p, &q, &m1, 4).unwrap(), &r, &m2, 4).unwrap();
        let expected_left_evts: BTreeSet<Event> =
            [ev(&vocab, &["a", "b", "c"]), ev(&vocab, &["b"]), ev(&vocab, &["c"])]
                .into_iter()
                .collect();
        assert_eq!(left.evts(), &expected_left_evts);
        assert!(left.beh().contains(&tr(&vocab, &[&["a", "b", "c"]])));
        assert!(!left.beh().contains(&tr(&vocab, &[&["a", "b"]])));
        assert_eq!(
            left.beh(),
            &closure(&[
                tr(&vocab, &[&["a", "b", "c"]]),
                tr(&vocab, &[&["b"], &["c"]]),
                tr(&vocab, &[&["c"], &["b"]]),
            ])
        );

        let qr = mapping_compose(&q, &r, &m2, 4).unwrap();
        let right = mapping_compose(&p, &qr, &m1, 4).unwrap();
        let expected_right_evts: BTreeSet<Event> =
            [ev(&vocab, &["b"]), ev(&vocab, &["c"]), ev(&vocab, &["a", "b"])]
                .into_iter()
                .collect();
        assert_eq!(right.evts(), &expected_right_evts);
        assert!(right.beh().contains(&tr(&vocab, &[&["a", "b"], &["c"]])));
        assert!(right.beh().contains(&tr(&vocab, &[&["c"], &["a", "b"]])));
        assert!(!right.beh().contains(&tr(&vocab, &[&["a", "b", "c"]])));
        assert_ne!(left.beh(), right.beh());
    }

    #[test]
    fn chain_composition_activates_each_entry_once() {
        let vocab = flat_vocab(&["a", "b", "c"]);
        let p = process(&vocab, &["a"], &[tr(&vocab, &[&["a"]])]);
        let q = process(&vocab, &["b"], &[tr(&vocab, &[&["b"]])]);
        let r = process(&vocab, &["c"], &[tr(&vocab, &[&["c"]])]);
        let mapping = Mapping::from_pairs([
            (lab(&vocab, "a"), lab(&vocab, "b")),
            (lab(&vocab, "b"), lab(&vocab, "c")),
        ]);
        let chained = compose_chain(&[p.clone(), q.clone(), r.clone()], &mapping, 4).unwrap();
        let left = mapping_compose(
            &mapping_compose(&p, &q, &Mapping::from_pairs([(lab(&vocab, "a"), lab(&vocab, "b"))]), 4)
                .unwrap(),
            &r,
            &Mapping::from_pairs([(lab(&vocab, "b"), lab(&vocab, "c"))]),
            4,
        )
        .unwrap();
        assert_eq!(chained, left);
    }

    #[test]
    fn mapping_orientation_rejects_entries_crossing_both_ways() {
        let vocab = flat_vocab(&["a", "x"]);
        let p = process(&vocab, &["a"], &[tr(&vocab, &[&["a"]])]);
        let q = process(&vocab, &["x"], &[tr(&vocab, &[&["x"]])]);
        let backward = Mapping::from_pairs([(lab(&vocab, "x"), lab(&vocab, "a"))]);
        assert!(mapping_compose(&p, &q, &backward, 4).is_ok());

        let vocab2 = flat_vocab(&["a", "b", "x", "y"]);
        let p2 = process(&vocab2, &["a", "y"], &[tr(&vocab2, &[&["a"]])]);
        let q2 = process(&vocab2, &["x", "b"], &[tr(&vocab2, &[&["x"]])]);
        let mixed = Mapping::from_pairs([
            (lab(&vocab2, "a"), lab(&vocab2, "x")),
            (lab(&vocab2, "b"), lab(&vocab2, "y")),
        ]);
        assert!(matches!(
            mapping_compose(&p2, &q2, &mixed, 4),
            Err(SemanticsError::MappingOrientation { .. })
        ));
    }

    #[test]
    fn inert_mapping_entries_outside_both_alphabets_are_tolerated() {
        let vocab = flat_vocab(&["a", "b", "x", "z"]);
        let p = process(&vocab, &["a", "b"], &[tr(&vocab, &[&["b"], &["a"]])]);
        let q = process(&vocab, &["x"], &[tr(&vocab, &[&["x"]])]);
        let mapping = Mapping::from_pairs([
            (lab(&vocab, "a"), lab(&vocab, "x")),
            (lab(&vocab, "z"), lab(&vocab, "x")),
        ]);
        let composed = mapping_compose(&p, &q, &mapping, 4).unwrap();
        assert!(composed.beh().contains(&tr(&vocab, &[&["b"], &["a", "x"]])));
    }

    #[test]
    fn prefix_closure_check_requires_the_empty_trace() {
        let vocab = flat_vocab(&["a"]);
        let with_empty: BTreeSet<Trace> =
            [Trace::empty(), tr(&vocab, &[&["a"]])].into_iter().collect();
        assert!(is_prefix_closed(&with_empty));
        let without_empty: BTreeSet<Trace> = [tr(&vocab, &[&["a"]])].into_iter().collect();
        assert!(!is_prefix_closed(&without_empty));
    }

    #[test]
    fn labels_order_by_signature_name_then_argument_constants() {
        let mut vocab = Vocabulary::new();
        vocab.add_domain("Msg", &["public", "secret"]).unwrap();
        vocab.add_domain("Key", &["none", "kX", "kY"]).unwrap();
        vocab.add_signature("writeBob", &[("m", "Msg")]).unwrap();
        vocab.add_signature("writeEve", &[("m", "Msg")]).unwrap();
        vocab
            .add_signature("encWrite", &[("m", "Msg"), ("k", "Key")])
            .unwrap();

        let enc = vocab.label("encWrite", &["secret", "none"]).unwrap();
        let bob = vocab.label("writeBob", &["public"]).unwrap();
        let bob_secret = vocab.label("writeBob", &["secret"]).unwrap();
        let eve = vocab.label("writeEve", &["public"]).unwrap();
        assert!(enc < bob);
        assert!(bob < bob_secret);
        assert!(bob_secret < eve);
        assert_eq!(vocab.render_label(&enc), "encWrite(secret, none)");
    }

    #[test]
    fn process_validation_rejects_broken_invariants() {
        let vocab = flat_vocab(&["a", "b"]);
        let evts: BTreeSet<Event> = [ev(&vocab, &["a"])].into_iter().collect();
        let beh = closure(&[tr(&vocab, &[&["a"]])]);
        assert!(Process::new(alpha(&vocab, &["a"]), evts.clone(), beh.clone()).is_ok());

        let stray_evts: BTreeSet<Event> = [ev(&vocab, &["b"])].into_iter().collect();
        assert!(matches!(
            Process::new(alpha(&vocab, &["a"]), stray_evts, BTreeSet::from([Trace::empty()])),
            Err(SemanticsError::AlphabetViolation(_))
        ));

        let unlisted: BTreeSet<Trace> = closure(&[tr(&vocab, &[&["a"], &["a"]])]);
        assert!(matches!(
            Process::new(alpha(&vocab, &["a"]), BTreeSet::new(), unlisted),
            Err(SemanticsError::TraceEventOutsideEvts)
        ));

        let gap: BTreeSet<Trace> = [Trace::empty(), tr(&vocab, &[&["a"], &["a"]])]
            .into_iter()
            .collect();
        assert!(matches!(
            Process::new(alpha(&vocab, &["a"]), evts, gap),
            Err(SemanticsError::NotPrefixClosed)
        ));
    }
}
