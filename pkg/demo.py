# demo.py

from funcount.config import configure_logging, load_settings
from funcount.gfpca import fraction_of_variance
from funcount.simulate import simulate_cohort
from services.pipeline_flow import run_decomposition, run_prediction


def main():
    settings = load_settings()
    configure_logging(settings.log_level)

    cohort = simulate_cohort(300, seed=7, death_rate=0.2)
    print(f"Simulated {cohort.curves.n_subjects} subjects on a {cohort.curves.n_points}-point grid")

    decomps = {}
    for method in ("gfpca", "pfpca", "narfd"):
        result = run_decomposition(cohort.curves, method, k=2, lam=1.0 if method == "narfd" else None)
        decomps[method] = result["decomposition"]
        print(f"=== {method.upper()} === mean MAE {result['mae'].mean():.3f}")

    print("PFPCA cumulative variance:", fraction_of_variance(decomps["pfpca"]).round(3))

    for model in ("logistic", "adaboost"):
        run = run_prediction(cohort.subjects, model, decomps["pfpca"], seed=7)
        print(f"=== {model.upper()} + PFPCA === test AUC {run['summary'].auc:.3f}")


if __name__ == "__main__":
    main()
