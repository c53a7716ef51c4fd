//! C ABI over pathgen: load a knowledge graph, a trained generator and a
//! triplet scorer, then query them.
//!
//! Every fallible call returns a `PgStatus`; on failure the message is
//! available from `pg_last_error` on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.
//! Pointer arguments must be valid for the duration of the call, strings
//! must be NUL-terminated UTF-8, and handles may be shared across threads
//! for reading.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pathgen::evaluator::{BilinearScorer, TripletScorer};
use pathgen::generator::Generator;
use pathgen::kg::{DiscardSet, KnowledgeGraph};
use pathgen::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Lookup = 5,
    OutOfVocab = 6,
    Invalid = 7,
    Config = 8,
    Checkpoint = 9,
    Internal = 10,
    Panic = 11,
}

pub struct PgKg(KnowledgeGraph);

pub struct PgGenerator(Generator);

pub struct PgScorer(BilinearScorer);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> PgStatus {
    match e {
        Error::Io(_) => PgStatus::Io,
        Error::Parse { .. } | Error::Json(_) => PgStatus::Parse,
        Error::Lookup { .. } => PgStatus::Lookup,
        Error::OutOfVocab(_) => PgStatus::OutOfVocab,
        Error::Invalid(_) | Error::EmptyGraph | Error::Unsatisfiable { .. } => PgStatus::Invalid,
        Error::Config(_) => PgStatus::Config,
        Error::Checkpoint(_) => PgStatus::Checkpoint,
        _ => PgStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            PgStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            PgStatus::InvalidUtf8
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PgStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    out.write(v);
    Ok(())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn pg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a `head<TAB>relation<TAB>tail` file with the default discard set.
#[no_mangle]
pub unsafe extern "C" fn pg_kg_load(path: *const c_char, out: *mut *mut PgKg) -> PgStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let kg = KnowledgeGraph::load_tsv(Path::new(path), &DiscardSet::default())?;
        put(out, Box::into_raw(Box::new(PgKg(kg))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_kg_free(kg: *mut PgKg) {
    if !kg.is_null() {
        drop(Box::from_raw(kg));
    }
}

#[no_mangle]
pub unsafe extern "C" fn pg_kg_num_entities(kg: *const PgKg, out: *mut usize) -> PgStatus {
    guard(|| put(out, handle(kg, "kg")?.0.num_entities(), "out"))
}

/// Number of stored triplets, inverse edges excluded.
#[no_mangle]
pub unsafe extern "C" fn pg_kg_num_triplets(kg: *const PgKg, out: *mut usize) -> PgStatus {
    guard(|| put(out, handle(kg, "kg")?.0.num_triplets(), "out"))
}

/// Whether the fact is in the graph; unknown names give false. Inverse
/// relation names ("_IsA") are accepted.
#[no_mangle]
pub unsafe extern "C" fn pg_kg_has_triplet(
    kg: *const PgKg,
    head: *const c_char,
    relation: *const c_char,
    tail: *const c_char,
    out: *mut bool,
) -> PgStatus {
    guard(|| {
        let kg = &handle(kg, "kg")?.0;
        let (h, r, t) = (text(head, "head")?, text(relation, "relation")?, text(tail, "tail")?);
        let found = match (kg.entity_by_phrase(h), kg.relation_by_name(r), kg.entity_by_phrase(t)) {
            (Some(h), Some(r), Some(t)) => kg.has_triplet(h, r, t),
            _ => false,
        };
        put(out, found, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_generator_load(path: *const c_char, out: *mut *mut PgGenerator) -> PgStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let g = Generator::load(Path::new(path))?;
        put(out, Box::into_raw(Box::new(PgGenerator(g))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_generator_free(generator: *mut PgGenerator) {
    if !generator.is_null() {
        drop(Box::from_raw(generator));
    }
}

/// Greedy path from `source` to `target` as a JSON object with the token
/// ids, rendered text and decoded path. `kg` may be NULL; when given, the
/// decoded entities and relations are marked against it. Release the
/// string with `pg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn pg_generator_generate(
    generator: *const PgGenerator,
    kg: *const PgKg,
    source: *const c_char,
    target: *const c_char,
    out_json: *mut *mut c_char,
) -> PgStatus {
    guard(|| {
        let g = &handle(generator, "generator")?.0;
        let kg = kg.as_ref().map(|k| &k.0);
        let (s, t) = (text(source, "source")?, text(target, "target")?);
        if out_json.is_null() {
            return Err(Fail::Null("out_json"));
        }
        let r = g.generate_path(s, t, kg)?;
        let json = serde_json::to_string(&r).map_err(Error::from)?;
        let c = CString::new(json).map_err(|_| Error::invalid("generated text contains NUL"))?;
        put(out_json, c.into_raw(), "out_json")
    })
}

/// Release a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn pg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub unsafe extern "C" fn pg_scorer_load(path: *const c_char, out: *mut *mut PgScorer) -> PgStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let s = BilinearScorer::load(Path::new(path))?;
        put(out, Box::into_raw(Box::new(PgScorer(s))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_scorer_free(scorer: *mut PgScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Plausibility in (0, 1). Unknown entities share one embedding; an
/// unknown relation is a `PG_STATUS_LOOKUP` error.
#[no_mangle]
pub unsafe extern "C" fn pg_scorer_score(
    scorer: *const PgScorer,
    head: *const c_char,
    relation: *const c_char,
    tail: *const c_char,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let s = &handle(scorer, "scorer")?.0;
        let v = s.score(text(head, "head")?, text(relation, "relation")?, text(tail, "tail")?)?;
        put(out, v, "out")
    })
}
