use super::*;
use crate::domain::{validate_address, RecipientEntry};

fn start() -> Timestamp {
    Timestamp::parse_rfc3339("2025-01-01T00:00:00Z").unwrap()
}

fn ms(n: u64) -> Duration {
    Duration::from_millis(n)
}

fn sleeper(d: Duration) -> Handler {
    handler_fn(move |inv: Invocation, _p| async move {
        inv.runtime.sleep(d).await;
        Ok(())
    })
}

#[test]
fn duplicate_function_rejected() {
    let rt = Runtime::virtual_at(start());
    rt.register_function(FunctionSpec::new("f", Trigger::Http), sleeper(ms(1))).unwrap();
    assert_eq!(
        rt.register_function(FunctionSpec::new("f", Trigger::Http), sleeper(ms(1))),
        Err(RuntimeError::DuplicateFunction("f".into()))
    );
}

#[test]
fn zero_concurrency_rejected() {
    let rt = Runtime::virtual_at(start());
    let spec = FunctionSpec::new("f", Trigger::Http).max_concurrency(0);
    assert!(matches!(rt.register_function(spec, sleeper(ms(1))), Err(RuntimeError::InvalidSpec(_))));
}

#[test]
fn unknown_function() {
    let rt = Runtime::virtual_at(start());
    assert_eq!(rt.invoke_blocking("nope", Payload::Empty).unwrap_err(), RuntimeError::UnknownFunction("nope".into()));
}

#[test]
fn cold_then_warm_then_cold_after_idle() {
    let rt = Runtime::virtual_at(start());
    let spec = FunctionSpec::new("f", Trigger::Http).cold_start(ms(120)).keep_alive(Duration::from_secs(60));
    rt.register_function(spec, sleeper(ms(5))).unwrap();

    let first = rt.invoke_blocking("f", Payload::Empty).unwrap();
    assert!(first.cold);
    assert_eq!(first.start, first.triggered_at + ms(120));
    assert_eq!(first.billed_ms, 5);

    let second = rt.invoke_blocking("f", Payload::Empty).unwrap();
    assert!(!second.cold);
    assert_eq!(second.start, second.triggered_at);

    rt.advance_clock(Duration::from_secs(61)).unwrap();
    let third = rt.invoke_blocking("f", Payload::Empty).unwrap();
    assert!(third.cold);
}

#[test]
fn handler_error_keeps_record() {
    let rt = Runtime::virtual_at(start());
    let h = handler_fn(|_inv, _p| async { Err(HandlerError::new("boom")) });
    rt.register_function(FunctionSpec::new("f", Trigger::Http), h).unwrap();
    match rt.invoke_blocking("f", Payload::Empty) {
        Err(RuntimeError::HandlerError { cause, record }) => {
            assert_eq!(cause, "boom");
            assert_eq!(record.error.as_deref(), Some("boom"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(rt.records().len(), 1);
}

#[test]
fn billed_duration_rounds_up_to_milliseconds() {
    let t = Timestamp::from_micros(1_000);
    assert_eq!(billed_ms(t, t), 0);
    assert_eq!(billed_ms(t, Timestamp::from_micros(1_001)), 1);
    assert_eq!(billed_ms(t, Timestamp::from_micros(2_200)), 2);
    assert_eq!(billed_ms(t, Timestamp::from_micros(3_000)), 2);
}

#[test]
fn concurrency_cap_holds_under_load() {
    let rt = Runtime::virtual_at(start());
    let spec = FunctionSpec::new("f", Trigger::Http).max_concurrency(3).cold_start(ms(120));
    rt.register_function(spec, sleeper(Duration::from_secs(1))).unwrap();
    for _ in 0..20 {
        rt.invoke_detached("f", Payload::Empty).unwrap();
    }
    rt.run_until_idle().unwrap();
    let records = rt.records_for("f");
    assert_eq!(records.len(), 20);
    assert_eq!(max_overlap(&records, "f"), 3);
    // Brute-force recount at every record start.
    for r in &records {
        let live = records.iter().filter(|o| o.start <= r.start && r.start < o.end).count();
        assert!(live <= 3);
    }
    assert_eq!(records.iter().filter(|r| r.cold).count(), 3);
}

#[test]
fn advance_zero_is_identity_and_timers_fire_in_order() {
    let rt = Runtime::virtual_at(start());
    let t0 = rt.now();
    rt.advance_clock(Duration::ZERO).unwrap();
    assert_eq!(rt.now(), t0);

    let log = Rc::new(RefCell::new(Vec::new()));
    for (label, secs) in [("two", 2u64), ("one", 1)] {
        let (l, r) = (log.clone(), rt.clone());
        rt.schedule_at(t0 + Duration::from_secs(secs), move || l.borrow_mut().push((label, r.now())));
    }
    rt.advance_clock(Duration::from_secs(3)).unwrap();
    assert_eq!(*log.borrow(), vec![("one", t0 + Duration::from_secs(1)), ("two", t0 + Duration::from_secs(2))]);
    assert_eq!(rt.now(), t0 + Duration::from_secs(3));
}

#[test]
fn simultaneous_timers_fire_in_enqueue_order() {
    let rt = Runtime::virtual_at(start());
    let log = Rc::new(RefCell::new(Vec::new()));
    let at = rt.now() + Duration::from_secs(1);
    for i in 0..5 {
        let l = log.clone();
        rt.schedule_at(at, move || l.borrow_mut().push(i));
    }
    rt.advance_clock(Duration::from_secs(1)).unwrap();
    assert_eq!(*log.borrow(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn virtual_only_operations_fail_in_real_time() {
    let rt = Runtime::new(ClockMode::RealTime, start());
    assert_eq!(rt.advance_clock(ms(1)), Err(RuntimeError::WrongMode));
    assert_eq!(rt.run_until_idle(), Err(RuntimeError::WrongMode));
}

#[test]
fn real_time_step_runs_due_work() {
    let rt = Runtime::new(ClockMode::RealTime, start());
    let hit = Rc::new(Cell::new(false));
    let h = hit.clone();
    rt.schedule_at(rt.now(), move || h.set(true));
    rt.step_realtime();
    assert!(hit.get());
}

fn batch(campaign: &str, seq: u32, is_final: bool) -> Batch {
    Batch {
        campaign_id: campaign.into(),
        batch_seq: seq,
        recipients: vec![RecipientEntry::new(validate_address("a@ok.sim").unwrap())],
        is_final,
        template_id: "t".into(),
    }
}

#[test]
fn queue_trigger_runs_consumer_per_batch_in_order() {
    let rt = Runtime::virtual_at(start());
    rt.add_queue_default(Arc::new(FifoQueue::new("batches")));
    let seen = Rc::new(RefCell::new(Vec::new()));
    let s = seen.clone();
    let h = handler_fn(move |inv: Invocation, p| {
        let s = s.clone();
        async move {
            let Payload::Batch(d) = p else { return Err(HandlerError::new("bad payload")) };
            inv.runtime.sleep(ms(50)).await;
            s.borrow_mut().push(d.message.body.batch_seq);
            d.queue.ack(&d.lease, inv.runtime.now()).map_err(HandlerError::new)
        }
    });
    rt.register_function(FunctionSpec::new("sender", Trigger::Queue("batches".into())).max_concurrency(4), h).unwrap();
    for seq in 0..5 {
        assert!(rt.enqueue_batch("batches", &seq.to_string(), batch("c1", seq, seq == 4)).unwrap());
    }
    assert!(!rt.enqueue_batch("batches", "0", batch("c1", 0, false)).unwrap());
    rt.run_until_idle().unwrap();
    assert_eq!(*seen.borrow(), vec![0, 1, 2, 3, 4]);
    assert!(rt.queue("batches").unwrap().is_empty());
}

#[test]
fn unacked_batch_is_redelivered_after_visibility_timeout() {
    let rt = Runtime::virtual_at(start());
    rt.add_queue(Arc::new(FifoQueue::new("batches")), Duration::from_secs(30));
    let deliveries = Rc::new(RefCell::new(Vec::new()));
    let d2 = deliveries.clone();
    let h = handler_fn(move |inv: Invocation, p| {
        let d2 = d2.clone();
        async move {
            let Payload::Batch(d) = p else { unreachable!() };
            d2.borrow_mut().push((d.message.delivery_count, inv.runtime.now()));
            if d.message.delivery_count > 1 {
                d.queue.ack(&d.lease, inv.runtime.now()).unwrap();
            }
            Ok(())
        }
    });
    rt.register_function(FunctionSpec::new("sender", Trigger::Queue("batches".into())).cold_start(Duration::ZERO), h)
        .unwrap();
    let t0 = rt.now();
    rt.enqueue_batch("batches", "0", batch("c", 0, true)).unwrap();
    rt.run_until_idle().unwrap();
    assert_eq!(*deliveries.borrow(), vec![(1, t0), (2, t0 + Duration::from_secs(30))]);
}

#[test]
fn dead_letter_hook_sees_poison_batches() {
    let rt = Runtime::virtual_at(start());
    rt.add_queue(Arc::new(FifoQueue::with_max_redeliveries("batches", 2)), Duration::from_secs(1));
    let parked = Rc::new(RefCell::new(Vec::new()));
    let p2 = parked.clone();
    rt.on_dead_letter("batches", move |dl| p2.borrow_mut().push(dl.message.body.batch_seq));
    let h = handler_fn(|_inv, _p| async { Ok(()) });
    rt.register_function(FunctionSpec::new("sender", Trigger::Queue("batches".into())), h).unwrap();
    rt.enqueue_batch("batches", "7", batch("c", 7, true)).unwrap();
    rt.run_until_idle().unwrap();
    assert_eq!(*parked.borrow(), vec![7]);
    assert_eq!(rt.records_for("sender").len(), 3);
}

fn event(addr: &str, n: u32) -> Payload {
    Payload::Json(serde_json::json!({ "addr": addr, "n": n }))
}

#[test]
fn topic_fans_out_to_every_subscriber() {
    let rt = Runtime::virtual_at(start());
    let hits = Rc::new(RefCell::new(Vec::new()));
    for name in ["a", "b"] {
        let h2 = hits.clone();
        let h = handler_fn(move |inv: Invocation, _p| {
            let h2 = h2.clone();
            async move {
                h2.borrow_mut().push(inv.function.clone());
                Ok(())
            }
        });
        rt.register_function(FunctionSpec::new(name, Trigger::Topic("events".into())), h).unwrap();
    }
    rt.publish("events", "x@ok.sim", event("x@ok.sim", 0));
    rt.run_until_idle().unwrap();
    let mut h = hits.borrow().clone();
    h.sort();
    assert_eq!(h, vec!["a", "b"]);
}

#[test]
fn topic_retries_then_delivers_once() {
    let rt = Runtime::virtual_at(start());
    let attempts = Rc::new(Cell::new(0));
    let successes = Rc::new(Cell::new(0));
    let (a, s) = (attempts.clone(), successes.clone());
    let h = handler_fn(move |_inv, _p| {
        let (a, s) = (a.clone(), s.clone());
        async move {
            a.set(a.get() + 1);
            if a.get() <= 2 {
                return Err(HandlerError::new("transient"));
            }
            s.set(s.get() + 1);
            Ok(())
        }
    });
    rt.register_function(FunctionSpec::new("sub", Trigger::Topic("events".into())), h).unwrap();
    rt.publish("events", "k", event("k", 0));
    rt.run_until_idle().unwrap();
    assert_eq!((attempts.get(), successes.get()), (3, 1));
    assert!(rt.topic_dead_letters().is_empty());
}

#[test]
fn topic_dead_letters_after_retries() {
    let rt = Runtime::virtual_at(start());
    let h = handler_fn(|_inv, _p| async { Err(HandlerError::new("down")) });
    rt.register_function(FunctionSpec::new("sub", Trigger::Topic("events".into())), h).unwrap();
    rt.publish("events", "k", event("k", 0));
    rt.run_until_idle().unwrap();
    let dead = rt.topic_dead_letters();
    assert_eq!(dead.len(), 1);
    assert_eq!(dead[0].attempts, 1 + TOPIC_MAX_RETRIES);
    assert_eq!(rt.records_for("sub").len(), 4);
}

#[test]
fn topic_preserves_per_key_order_across_cold_starts() {
    let rt = Runtime::virtual_at(start());
    let seen = Rc::new(RefCell::new(Vec::new()));
    let s = seen.clone();
    let h = handler_fn(move |_inv, p| {
        let s = s.clone();
        async move {
            let Payload::Json(v) = p else { unreachable!() };
            s.borrow_mut().push((v["addr"].as_str().unwrap().to_owned(), v["n"].as_u64().unwrap()));
            Ok(())
        }
    });
    rt.register_function(FunctionSpec::new("sub", Trigger::Topic("events".into())).max_concurrency(8), h).unwrap();
    for n in 0..4 {
        for addr in ["a@x.com", "b@x.com"] {
            rt.publish("events", addr, event(addr, n));
        }
        rt.advance_clock(ms(10)).unwrap();
    }
    rt.run_until_idle().unwrap();
    for addr in ["a@x.com", "b@x.com"] {
        let order: Vec<u64> = seen.borrow().iter().filter(|(a, _)| a == addr).map(|(_, n)| *n).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }
}

#[test]
fn subscribe_requires_registered_function() {
    let rt = Runtime::virtual_at(start());
    assert!(matches!(rt.subscribe("events", "ghost"), Err(RuntimeError::UnknownFunction(_))));
    rt.register_function(FunctionSpec::new("f", Trigger::Http), sleeper(ms(1))).unwrap();
    rt.subscribe("events", "f").unwrap();
    rt.subscribe("events", "f").unwrap();
    assert_eq!(rt.subscribers("events"), vec!["f"]);
}

fn scenario() -> Vec<InvocationRecord> {
    let rt = Runtime::virtual_at(start());
    let spec = FunctionSpec::new("f", Trigger::Http).max_concurrency(2).keep_alive(ms(500));
    rt.register_function(spec, sleeper(ms(300))).unwrap();
    for i in 0..6u64 {
        let r = rt.clone();
        rt.schedule_at(rt.now() + ms(i * 170), move || r.invoke_detached("f", Payload::Empty).unwrap());
    }
    rt.run_until_idle().unwrap();
    rt.records()
}

#[test]
fn identical_runs_produce_identical_records() {
    assert_eq!(scenario(), scenario());
}
