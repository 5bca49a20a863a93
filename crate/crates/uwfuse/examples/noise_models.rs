//! Student-t versus Gaussian noise: effective variances under the Laplace
//! approximation and the bounded influence of heavy-tailed residuals.
//!
//! Run with: cargo run -p uwfuse --example noise_models

use uwfuse::noise::NoiseModel;

fn main() {
    println!("effective variance scale nu/(nu+1):");
    for nu in [0.5, 1.0, 2.0, 4.0, 8.0, 32.0] {
        let model = NoiseModel::student_t(nu).unwrap();
        println!(
            "  nu = {nu:>4}: sigma^2 = 1 -> effective {:.6}",
            model.effective_variance(1.0).unwrap()
        );
    }

    let student = NoiseModel::student_t(8.0).unwrap();
    let gaussian = NoiseModel::Gaussian;
    let sigma2 = 1.0;
    println!("\nscore (influence) at growing residuals, sigma^2 = 1:");
    println!("{:>10} {:>14} {:>14}", "delta", "student-t(8)", "gaussian");
    for delta in [0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1e4] {
        println!(
            "{delta:>10} {:>14.6} {:>14.1}",
            student.score(delta, sigma2).unwrap(),
            gaussian.score(delta, sigma2).unwrap()
        );
    }
    let bound = student.score_bound(sigma2).unwrap().unwrap();
    println!(
        "\nstudent-t influence peaks at |delta| = sigma sqrt(nu) = {:.4} with value {:.6};",
        (8.0f64).sqrt(),
        bound
    );
    println!("the gaussian score keeps growing linearly and never saturates.");
}
