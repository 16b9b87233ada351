//! Graph machinery the recovery leans on: valid causal orders, closed
//! neighborhoods, and surrounded nodes.
//!
//! A valid order lists the nodes so that every edge points forward;
//! recovery is only ever expected to pin the graph down up to such a
//! reordering. A node is *surrounded* when some other node's children
//! cover its own closed children — exactly the nodes whose estimates may
//! stay entangled under soft interventions.
//!
//! Run with: `cargo run --release -p scalei --example graph_orders`

use scalei::dataset::graph_to_text;
use scalei::graph::{surround_map, valid_orders, Dag};

fn main() {
    for (label, dag) in [
        ("chain", Dag::chain(3)),
        ("diamond", Dag::diamond()),
        ("triangle", Dag::triangle()),
    ] {
        println!("{label}:");
        print!("{}", graph_to_text(&dag));
        for i in 0..dag.n() {
            println!(
                "  node {i}: pa̅ = {:?}, ch̅ = {:?}",
                dag.pa_bar(i),
                dag.ch_bar(i)
            );
        }
        let orders = valid_orders(&dag);
        println!("  {} valid order(s):", orders.len());
        for order in &orders {
            println!("    {:?}", order.seq());
        }
        let surround = surround_map(&dag);
        let surrounded = surround.surrounded();
        if surrounded.is_empty() {
            println!("  no surrounded nodes\n");
        } else {
            for i in surrounded {
                println!("  node {i} is surrounded by {:?}", surround.sur(i));
            }
            println!();
        }
    }
}
