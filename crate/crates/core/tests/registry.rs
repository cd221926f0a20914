use std::collections::BTreeMap;

use proptest::prelude::*;
use seisflow::graph::{GraphDocument, PeDescriptor};
use seisflow::registry::*;

fn pe_body(name: &str) -> String {
    serde_json::to_string(&PeDescriptor::atomic(name, "identity", &["i"], &["o"])).unwrap()
}

fn ann(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn workspace_examples() {
    let r = Registry::in_memory();
    let s = r.create_workspace("seismo", Some(ROOT)).unwrap();
    assert_eq!(s.parent.as_deref(), Some(ROOT));
    r.register_component(ROOT, ComponentKind::Pe, "taper", &pe_body("taper"), BTreeMap::new()).unwrap();
    assert_eq!(r.resolve(&s.workspace_id, "taper", None).unwrap().workspace_id, ROOT);
    assert!(matches!(r.create_workspace("x", Some("nope")), Err(RegistryError::UnknownParent(_))));
    r.create_workspace("x", Some(&s.workspace_id)).unwrap();
    assert!(matches!(r.create_workspace("x", Some(&s.workspace_id)), Err(RegistryError::DuplicateName(_))));
}

#[test]
fn versions_are_dense_and_old_ones_stay_resolvable() {
    let r = Registry::in_memory();
    let v1 = r.register_component(ROOT, ComponentKind::Pe, "bandpass", &pe_body("bp"), BTreeMap::new()).unwrap();
    assert_eq!(v1.version, 1);
    let v2 = r.register_component(ROOT, ComponentKind::Pe, "bandpass", &pe_body("bp2"), BTreeMap::new()).unwrap();
    assert_eq!(v2.version, 2);
    assert_eq!(r.resolve(ROOT, "bandpass", Some(1)).unwrap(), v1);
    assert_eq!(r.resolve(ROOT, "bandpass", None).unwrap(), v2);
    assert!(matches!(r.resolve(ROOT, "bandpass", Some(3)), Err(RegistryError::NotFound(_))));
    assert!(matches!(r.resolve(ROOT, "nothing", None), Err(RegistryError::NotFound(_))));
    assert!(matches!(
        r.register_component("ghost", ComponentKind::Pe, "a", &pe_body("a"), BTreeMap::new()),
        Err(RegistryError::UnknownWorkspace(_))
    ));
}

#[test]
fn bodies_are_checked_per_kind() {
    let r = Registry::in_memory();
    let bad_graph = r#"{"nodes":{"a":{"pe":"builtin:identity"}},"edges":[{"from":"a.o","to":"zz.i"}]}"#;
    assert!(matches!(
        r.register_component(ROOT, ComponentKind::Graph, "g", bad_graph, BTreeMap::new()),
        Err(RegistryError::MalformedBody { .. })
    ));
    assert!(matches!(
        r.register_component(ROOT, ComponentKind::Pe, "p", "{not json", BTreeMap::new()),
        Err(RegistryError::MalformedBody { .. })
    ));
    r.register_component(ROOT, ComponentKind::Pe, "ident", &pe_body("ident"), BTreeMap::new()).unwrap();
    let good = r#"{"nodes":{"a":{"pe":"ident@1"},"b":{"pe":"builtin:scale","params":{"factor":2.0}}},"edges":[{"from":"a.o","to":"b.i"}],"feeds":{"in":"a.i"}}"#;
    let rec = r.register_component(ROOT, ComponentKind::Graph, "g", good, BTreeMap::new()).unwrap();
    assert_eq!(rec.body, GraphDocument::parse(good).unwrap().to_canonical_json());
    let f = r.register_component(ROOT, ComponentKind::Function, "conn", r#"{"from":"a.o","to":"b.i"}"#, BTreeMap::new()).unwrap();
    assert_eq!(f.version, 1);
}

#[test]
fn graph_documents_resolve_through_the_registry() {
    let r = Registry::in_memory();
    let child = r.create_workspace("child", Some(ROOT)).unwrap().workspace_id;
    r.register_component(ROOT, ComponentKind::Pe, "step", &pe_body("root-step"), BTreeMap::new()).unwrap();
    r.register_component(&child, ComponentKind::Pe, "step", &pe_body("child-step"), BTreeMap::new()).unwrap();
    let doc = GraphDocument::parse(r#"{"nodes":{"a":{"pe":"step"}},"feeds":{"in":"a.i"}}"#).unwrap();
    let from_child = doc.resolve(&r.resolver(&child)).unwrap();
    assert_eq!(from_child.node("a").unwrap().descriptor.name, "child-step");
    let from_root = doc.resolve(&r.resolver(ROOT)).unwrap();
    assert_eq!(from_root.node("a").unwrap().descriptor.name, "root-step");
    let pinned = GraphDocument::parse(r#"{"nodes":{"a":{"pe":"root:step@1"}},"feeds":{"in":"a.i"}}"#).unwrap();
    assert_eq!(pinned.resolve(&r.resolver(&child)).unwrap().node("a").unwrap().descriptor.name, "root-step");
}

#[test]
fn search_examples() {
    let r = Registry::in_memory();
    let child = r.create_workspace("noise", Some(ROOT)).unwrap().workspace_id;
    r.register_component(ROOT, ComponentKind::Pe, "crosscorrelate", &pe_body("x"), BTreeMap::new()).unwrap();
    r.register_component(ROOT, ComponentKind::Pe, "stacker", &pe_body("s"), ann(&[("doc", "Correlation stacking")])).unwrap();
    r.register_component(ROOT, ComponentKind::Pe, "taper", &pe_body("t"), ann(&[("doc", "cosine ramp")])).unwrap();
    r.register_component(&child, ComponentKind::Pe, "taper", &pe_body("t2"), BTreeMap::new()).unwrap();
    let hits = r.search(&child, &["corr"]).unwrap();
    let names: Vec<&str> = hits.iter().map(|h| h.record.name.as_str()).collect();
    assert_eq!(names, ["crosscorrelate", "stacker"]);
    assert_eq!(r.search(&child, &[]).unwrap().len(), 4);
    let ramp = r.search(&child, &["RAMP"]).unwrap();
    assert_eq!(ramp.len(), 1);
    assert!(ramp[0].shadowed);
    assert_eq!(ramp[0].record.workspace_id, ROOT);
    let all = r.search(&child, &["taper"]).unwrap();
    assert_eq!((all[0].depth, all[0].shadowed), (0, false));
    assert_eq!((all[1].depth, all[1].shadowed), (1, true));
}

#[test]
fn persistence_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ws, rec) = {
        let r = Registry::open(dir.path()).unwrap();
        let ws = r.create_workspace("a", Some(ROOT)).unwrap();
        r.register_component(&ws.workspace_id, ComponentKind::Pe, "p", &pe_body("p"), ann(&[("k", "v")])).unwrap();
        let rec = r.register_component(&ws.workspace_id, ComponentKind::Pe, "p", &pe_body("q"), BTreeMap::new()).unwrap();
        (ws, rec)
    };
    assert!(dir.path().join("docs/root/a/p/2.json").exists());
    assert!(dir.path().join("index.json").exists());
    let r = Registry::open(dir.path()).unwrap();
    assert_eq!(r.workspace(&ws.workspace_id).unwrap(), ws);
    assert_eq!(r.resolve(&ws.workspace_id, "p", None).unwrap(), rec);
    assert_eq!(r.resolve(&ws.workspace_id, "p", Some(1)).unwrap().annotations["k"], "v");
    let leftovers: Vec<_> = walk(dir.path()).into_iter().filter(|p| p.extension().is_some_and(|e| e == "tmp")).collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

fn walk(p: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn corrupt_index_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.json"), "{").unwrap();
    assert!(matches!(Registry::open(dir.path()), Err(RegistryError::Corrupt(_))));
}

/// Random tree of workspaces with random registrations; returns the parent
/// table (index 0 is root) used by the brute-force walk.
fn random_registry(parents: &[usize], regs: &[(usize, u8)]) -> (Registry, Vec<String>) {
    let r = Registry::in_memory();
    let mut ids = vec![ROOT.to_string()];
    for (i, &p) in parents.iter().enumerate() {
        let parent = ids[p % ids.len()].clone();
        ids.push(r.create_workspace(&format!("w{i}"), Some(&parent)).unwrap().workspace_id);
    }
    for &(w, n) in regs {
        let ws = &ids[w % ids.len()];
        r.register_component(ws, ComponentKind::Pe, &format!("c{}", n % 5), &pe_body("x"), BTreeMap::new()).unwrap();
    }
    (r, ids)
}

proptest! {
    #[test]
    fn shadowing_matches_a_brute_force_walk(
        parents in prop::collection::vec(0usize..100, 0..8),
        regs in prop::collection::vec((0usize..100, 0u8..5), 0..25),
        from in 0usize..100,
        name in 0u8..5,
    ) {
        let (r, ids) = random_registry(&parents, &regs);
        let ws = &ids[from % ids.len()];
        let name = format!("c{name}");
        let mut want = None;
        let mut cur = Some(ws.clone());
        while let Some(w) = cur {
            let here: Vec<_> = r.components(Some(&w)).unwrap().into_iter().filter(|c| c.name == name).collect();
            if let Some(best) = here.into_iter().max_by_key(|c| c.version) {
                want = Some(best);
                break;
            }
            cur = r.workspace(&w).unwrap().parent;
        }
        match (r.resolve(ws, &name, None), want) {
            (Ok(got), Some(w)) => prop_assert_eq!(got, w),
            (Err(RegistryError::NotFound(_)), None) => {}
            (got, want) => prop_assert!(false, "got {:?}, want {:?}", got, want),
        }
    }

    #[test]
    fn versions_stay_dense(regs in prop::collection::vec((0usize..3, 0u8..5), 1..30)) {
        let (r, _) = random_registry(&[0, 0], &regs);
        let mut by: BTreeMap<(String, String), Vec<u32>> = BTreeMap::new();
        for c in r.components(None).unwrap() {
            by.entry((c.workspace_id, c.name)).or_default().push(c.version);
        }
        for v in by.values() {
            prop_assert_eq!(v.clone(), (1..=v.len() as u32).collect::<Vec<_>>());
        }
    }
}
