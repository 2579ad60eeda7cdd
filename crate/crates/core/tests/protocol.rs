use std::sync::{Arc, Mutex};

use pgasim::wire::{packet_count, HEADER_LEN};
use pgasim::{opcode, GlobalAddress, JobConfig, LocalRange, MessageKind, NodeId, Runtime, TopologyKind, TraceKind};
use proptest::prelude::*;

const SHARED: u64 = 1 << 16;

fn runtime(nodes: usize, topology: TopologyKind, packet_size: usize) -> Runtime {
    let mut cfg = JobConfig { nodes, topology, packet_size, ..JobConfig::default() };
    cfg.segment.shared_size = SHARED;
    Runtime::start(cfg).unwrap()
}

fn fill(len: u64, seed: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(13) ^ seed).collect()
}

#[derive(Debug, Clone)]
enum Op {
    Put { from: u16, to: u16, src: u64, dst: u64, len: u64 },
    Get { at: u16, from: u16, src: u64, dst: u64, len: u64 },
}

fn op_strategy(nodes: u16) -> impl Strategy<Value = Op> {
    let offs = 0..SHARED / 2;
    let len = 0u64..3000;
    prop_oneof![
        (0..nodes, 0..nodes, offs.clone(), offs.clone(), len.clone())
            .prop_map(|(from, to, src, dst, len)| Op::Put { from, to, src, dst, len }),
        (0..nodes, 0..nodes, offs.clone(), offs, len).prop_map(|(at, from, src, dst, len)| Op::Get { at, from, src, dst, len }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Sequential one-sided operations agree with a plain byte-array model.
    #[test]
    fn random_puts_and_gets_match_model(
        ops in prop::collection::vec(op_strategy(3), 1..12),
        mesh in any::<bool>(),
        packet_size in prop::sample::select(vec![128usize, 256, 512, 1024]),
    ) {
        let topology = if mesh { TopologyKind::Mesh } else { TopologyKind::Ring };
        let mut rt = runtime(3, topology, packet_size);
        let mut model: Vec<Vec<u8>> = (0..3u8).map(|n| fill(SHARED, n)).collect();
        for (n, m) in model.iter().enumerate() {
            rt.write_shared(n as u16, 0, m).unwrap();
        }
        for op in ops {
            match op {
                Op::Put { from, to, src, dst, len } => {
                    let h = rt.put(from, GlobalAddress::new(to, dst), LocalRange::shared(src, len)).unwrap();
                    rt.wait(h).unwrap();
                    rt.run_until_idle().unwrap();
                    let bytes = model[from as usize][src as usize..(src + len) as usize].to_vec();
                    model[to as usize][dst as usize..(dst + len) as usize].copy_from_slice(&bytes);
                }
                Op::Get { at, from, src, dst, len } => {
                    let h = rt.get(at, GlobalAddress::new(from, src), len, dst).unwrap();
                    rt.wait(h).unwrap();
                    let bytes = model[from as usize][src as usize..(src + len) as usize].to_vec();
                    model[at as usize][dst as usize..(dst + len) as usize].copy_from_slice(&bytes);
                }
            }
        }
        for (n, m) in model.iter().enumerate() {
            prop_assert_eq!(&rt.read_shared(n as u16, 0, SHARED).unwrap(), m);
        }
    }

    // A GET is one header-only request and a reply split by the packet size.
    #[test]
    fn get_packet_count_law(len in 0u64..20_000, packet_size in prop::sample::select(vec![128usize, 256, 512, 1024])) {
        let mut rt = runtime(2, TopologyKind::Ring, packet_size);
        rt.take_trace();
        let h = rt.get(0, GlobalAddress::new(1, 0), len.min(SHARED), 0).unwrap();
        rt.wait(h).unwrap();
        let sent: Vec<_> = rt
            .trace()
            .iter()
            .filter_map(|e| match e.kind {
                TraceKind::MessageSent { kind, packets, .. } => Some((kind, packets)),
                _ => None,
            })
            .collect();
        prop_assert_eq!(
            sent,
            vec![
                (MessageKind::Request, 1),
                (MessageKind::Reply, packet_count(HEADER_LEN + len.min(SHARED) as usize, packet_size)),
            ]
        );
    }
}

#[test]
fn messages_between_a_pair_arrive_in_order() {
    let mut rt = runtime(4, TopologyKind::Ring, 256);
    let mut handles = Vec::new();
    for i in 0..8u64 {
        handles.push(rt.put(0, GlobalAddress::new(2, 4096 * i), LocalRange::shared(0, 100 + 700 * i)).unwrap());
    }
    rt.wait_all(&handles).unwrap();
    rt.run_until_idle().unwrap();
    let sent: Vec<u64> = rt
        .trace()
        .iter()
        .filter_map(|e| match e.kind {
            TraceKind::MessageSent { seq, dst: NodeId(2), .. } if e.node == NodeId(0) => Some(seq),
            _ => None,
        })
        .collect();
    let arrived: Vec<u64> = rt
        .trace()
        .iter()
        .filter_map(|e| match e.kind {
            TraceKind::PacketArrived { origin: NodeId(0), seq, final_hop: true, .. } if e.node == NodeId(2) => Some(seq),
            _ => None,
        })
        .collect();
    let mut dedup = arrived.clone();
    dedup.dedup();
    assert_eq!(dedup, sent, "packets of different messages interleaved or reordered");
    let delivered = rt.trace().iter().filter(|e| e.node == NodeId(2) && matches!(e.kind, TraceKind::MessageDelivered { .. }));
    assert_eq!(delivered.count(), 8);
}

fn scripted_trace() -> Vec<pgasim::TraceEvent> {
    let mut rt = runtime(4, TopologyKind::Mesh, 512);
    let mut hs = Vec::new();
    for n in 0..4u16 {
        hs.push(rt.put(n, GlobalAddress::new((n + 1) % 4, 0), LocalRange::shared(1024, 5000)).unwrap());
        hs.push(rt.get(n, GlobalAddress::new((n + 2) % 4, 0), 3000, 20_000).unwrap());
    }
    rt.wait_all(&hs).unwrap();
    rt.barrier().unwrap();
    rt.take_trace()
}

#[test]
fn identical_runs_give_identical_traces() {
    assert_eq!(scripted_trace(), scripted_trace());
}

#[test]
fn no_node_leaves_a_barrier_before_all_arrive() {
    let mut rt = runtime(5, TopologyKind::Ring, 512);
    for round in 1..=3u64 {
        rt.take_trace();
        // Skew arrival: node 4 is busy sending first.
        let h = rt.put(4, GlobalAddress::new(2, 0), LocalRange::shared(0, 30_000)).unwrap();
        rt.barrier().unwrap();
        rt.wait(h).unwrap();
        let trace = rt.trace();
        let last_arrival = trace
            .iter()
            .filter(|e| matches!(e.kind, TraceKind::MessageDelivered { opcode: opcode::BARRIER_ARRIVE, .. }))
            .map(|e| e.time)
            .collect::<Vec<_>>();
        assert_eq!(last_arrival.len(), 5);
        let releases: Vec<_> = trace
            .iter()
            .filter(|e| matches!(e.kind, TraceKind::MessageDelivered { opcode: opcode::BARRIER_RELEASE, .. }))
            .map(|e| e.time)
            .collect();
        assert_eq!(releases.len(), 5, "round {round}");
        let all_in = *last_arrival.iter().max().unwrap();
        assert!(releases.iter().all(|&t| t > all_in));
    }
}

#[test]
fn one_sided_ops_run_no_handler_on_the_target() {
    let mut rt = runtime(2, TopologyKind::Ring, 512);
    let calls = Arc::new(Mutex::new(0));
    for op in [opcode::USER_MIN + 1, opcode::USER_MIN + 2] {
        let c = calls.clone();
        rt.register_handler(
            1,
            op,
            Box::new(move |_| {
                *c.lock().unwrap() += 1;
                Ok(())
            }),
        )
        .unwrap();
    }
    let h = rt.put(0, GlobalAddress::new(1, 0), LocalRange::shared(0, 4000)).unwrap();
    rt.wait(h).unwrap();
    let h = rt.get(0, GlobalAddress::new(1, 0), 4000, 0).unwrap();
    rt.wait(h).unwrap();
    rt.run_until_idle().unwrap();
    assert_eq!(*calls.lock().unwrap(), 0);
    let handler_runs = rt.trace().iter().filter(|e| {
        e.node == NodeId(1) && matches!(e.kind, TraceKind::Effect(pgasim::am::Effect::HandlerBegin { .. }))
    });
    assert_eq!(handler_runs.count(), 0);
}

#[test]
fn each_request_runs_its_handler_exactly_once() {
    let mut rt = runtime(3, TopologyKind::Ring, 128);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    rt.register_handler(
        2,
        opcode::USER_MIN + 5,
        Box::new(move |ctx| {
            s.lock().unwrap().push(ctx.args()[0]);
            Ok(())
        }),
    )
    .unwrap();
    let mut hs = Vec::new();
    for i in 0..20u32 {
        let from = (i % 2) as u16;
        hs.push(match i % 3 {
            0 => rt.am_request_short(from, 2, opcode::USER_MIN + 5, &[i]).unwrap(),
            1 => rt.am_request_medium(from, 2, opcode::USER_MIN + 5, &[i], LocalRange::shared(0, 900)).unwrap(),
            _ => rt.am_request_long(from, 2, opcode::USER_MIN + 5, &[i], LocalRange::shared(0, 900), 8192).unwrap(),
        });
    }
    rt.wait_all(&hs).unwrap();
    rt.run_until_idle().unwrap();
    let mut got = seen.lock().unwrap().clone();
    got.sort_unstable();
    assert_eq!(got, (0..20).collect::<Vec<_>>());
}

#[test]
fn waited_handle_is_gone() {
    let mut rt = runtime(2, TopologyKind::Ring, 512);
    let h = rt.put(0, GlobalAddress::new(1, 0), LocalRange::shared(0, 16)).unwrap();
    rt.wait(h).unwrap();
    assert!(rt.wait(h).is_err());
}
