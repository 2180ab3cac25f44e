mod common;

use common::gradients;

#[test]
fn gcn_weights() {
    let worst = gradients::gcn_weights().unwrap();
    println!("worst relative error {worst:.2e}");
}

#[test]
fn surrogate_adjacency_entries() {
    let worst = gradients::surrogate_adjacency().unwrap();
    println!("worst relative error {worst:.2e}");
}

#[test]
fn edge_predictor_parameters() {
    let worst = gradients::edge_predictor().unwrap();
    println!("worst relative error {worst:.2e}");
}
