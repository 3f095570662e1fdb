use fleet_core::fleet::events::{parse_jsonl, to_jsonl};
use fleet_core::fleet::{replay, run, run_with, EventKind, Scenario};
use fleet_core::TopologyKind;

fn kinds(name: &str) -> Vec<EventKind> {
    let out = run(&Scenario::load(name).unwrap()).unwrap();
    out.events.into_iter().map(|e| e.kind).collect()
}

#[test]
fn surprise_obstacle_is_sensed_then_replanned() {
    let ev = kinds("surprise");
    let report = ev
        .iter()
        .position(|e| matches!(e, EventKind::ObstacleReport { robot, cell: 4 } if robot == "Robot1"))
        .expect("Robot1 reports cell 4");
    let block = ev[report..]
        .iter()
        .position(|e| {
            matches!(e, EventKind::MapChange { cell: 4, blocked: true, source, .. } if source == "robot-sensor")
        })
        .expect("planner blocks the sensed cell")
        + report;
    let cancel = ev[block..]
        .iter()
        .position(|e| matches!(e, EventKind::Cancel { robot, value: 1, .. } if robot == "Robot1"))
        .expect("cancel follows")
        + block;
    let replan = ev[cancel..].iter().find_map(|e| match e {
        EventKind::Path { robot, cells, .. } if robot == "Robot1" => Some(cells.clone()),
        _ => None,
    });
    assert!(!replan.expect("new path").contains(&4));
    // Robot2's route never touched row 0
    assert!(!ev.iter().any(|e| matches!(e, EventKind::Cancel { robot, .. } if robot == "Robot2")));
    let reports = ev
        .iter()
        .filter(|e| matches!(e, EventKind::ObstacleReport { cell: 4, .. }))
        .count();
    assert_eq!(reports, 1);
    assert!(ev.iter().any(|e| matches!(e, EventKind::Arrived { robot, cell: 7 } if robot == "Robot1")));
    assert!(!ev.iter().any(|e| matches!(e, EventKind::Reached { cell: 4, .. })));
}

#[test]
fn unreachable_goal_is_reported_and_counts_as_resolved() {
    let out = run(&Scenario::load("unreachable").unwrap()).unwrap();
    assert!(out.all_resolved);
    let ev: Vec<_> = out.events.iter().map(|e| &e.kind).collect();
    let i = ev
        .iter()
        .position(|e| matches!(e, EventKind::GoalUnreachable { robot, goal: 3, .. } if robot == "Robot1"))
        .expect("GoalUnreachable for Robot1");
    // the planner's notice comes first; the log records the cancel when the robot honors it
    let c = ev[i..]
        .iter()
        .position(|e| matches!(e, EventKind::Cancel { robot, value: 1, .. } if robot == "Robot1"))
        .expect("Robot1 honors a cancel")
        + i;
    assert!(ev.iter().any(|e| matches!(e, EventKind::Arrived { robot, cell: 59 } if robot == "Robot2")));
    // halted in place: no movement once the cancel lands
    assert!(!ev[c..]
        .iter()
        .any(|e| matches!(e, EventKind::Reached { robot, .. } if robot == "Robot1")));
    assert_eq!(out.final_cells["Robot1"], 48);
}

#[test]
fn logs_replay_to_the_live_final_cells() {
    for name in ["fig6", "surprise", "unreachable"] {
        for k in TopologyKind::ALL {
            let sc = Scenario::load(name).unwrap();
            let out = run_with(&sc, k).unwrap();
            let parsed = parse_jsonl(&to_jsonl(&out.events)).unwrap();
            assert_eq!(parsed, out.events);
            let r = replay(&parsed).unwrap();
            assert!(r.matches(), "{name}/{k}");
            assert_eq!(r.final_cells, out.final_cells, "{name}/{k}");
            assert!(out.all_resolved, "{name}/{k}");
        }
    }
}

#[test]
fn fig6_ends_on_the_goals() {
    let out = run(&Scenario::load("fig6").unwrap()).unwrap();
    let cells: Vec<(String, u32)> = out.final_cells.into_iter().collect();
    assert_eq!(
        cells,
        [("Robot1".into(), 24), ("Robot2".into(), 2), ("Robot3".into(), 44)]
    );
}

#[test]
fn bad_scenarios_fail_before_start() {
    let fig6 = fleet_core::fleet::scenario::FIG6;
    let bad_cell = fig6.replacen("\"start\": 31", "\"start\": 64", 1);
    assert!(Scenario::from_json(&bad_cell).is_err());
    let unknown = fig6.replacen("\"seed\"", "\"sed\"", 1);
    let err = Scenario::from_json(&unknown).unwrap_err().to_string();
    assert!(err.contains("sed"), "{err}");
}
