//! Species, trap contexts, dimension checks and dB bookkeeping.
//!
//! Run with: `cargo run --example units_and_contexts`

use trapchar::units::*;

fn main() -> trapchar::Result<()> {
    let ctx = make_trap_context("Yb-171", hz_to_angular(5.329e6), hz_to_angular(12.7e6), 20e-6)?;
    println!(
        "{}: m = {:.3} u, axial 2pi x {:.3} MHz, radial 2pi x {:.1} MHz, height {} um",
        ctx.species.name,
        ctx.species.mass_u(),
        angular_to_hz(ctx.axial_freq) / 1e6,
        angular_to_hz(ctx.radial_freq) / 1e6,
        ctx.ion_surface_distance * 1e6,
    );

    // retune the axial mode; outside the window is an error
    let retuned = ctx.with_axial_freq(hz_to_angular(2.5e6))?;
    println!("retuned axial: {:.1} MHz", angular_to_hz(retuned.axial_freq) / 1e6);
    match ctx.with_axial_freq(hz_to_angular(40e6)) {
        Err(e) => println!("40 MHz rejected: {e}"),
        Ok(_) => unreachable!(),
    }

    // species beyond the built-ins come from a table
    let mut table = SpeciesTable::default();
    table.insert(IonSpecies::singly_charged("Sr-88", 87.9056)?);
    let sr = make_trap_context_in(&table, "Sr-88", hz_to_angular(1e6), hz_to_angular(4e6), 60e-6)?;
    println!("known species: {:?}", table.names().collect::<Vec<_>>());
    println!("Sr-88 context at 2pi x {} MHz", angular_to_hz(sr.axial_freq) / 1e6);
    if let Err(e) = make_trap_context("Xe-131", hz_to_angular(1e6), hz_to_angular(4e6), 60e-6) {
        println!("unknown species: {e}");
    }

    // quantities refuse to mix dimensions
    let a = Quantity::new(21.0, Dimension::Time);
    let b = Quantity::new(900.0, Dimension::Time);
    let f = Quantity::new(5.329e6, Dimension::Frequency);
    println!("T2/T1 = {}", b.try_ratio(a)?);
    if let Err(e) = a.try_add(f) {
        println!("time + frequency: {e}");
    }

    // input coupler, propagation, output coupler
    let total = db_chain(&[-6.5, -1.6, -1.6])?;
    println!(
        "through-chip loss: {total:.1} dB ({:.1}% transmitted)",
        100.0 * 10f64.powf(total / 10.0)
    );
    Ok(())
}
