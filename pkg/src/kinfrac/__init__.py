"""Community heritability of microbiome data from root-UniFrac dissimilarities."""

__version__ = "0.1.0"

from .abundance import OtuTable, RelAbundance, branch_proportions, load_otu_table, to_relative
from .diversity import gower_center, kernel_projector, project, root_unifrac
from .inference import bootstrap_ci, permutation_test
from .models import (
    AceComponents,
    CohortStructure,
    heritability,
    normal_reml_fit,
    wishart_fit,
    wishart_fit_gower,
)
from .ordination import metric_mds, nonmetric_mds, pcoa
from .phylo import PhyloTree, branch_subset, parse_newick, read_newick

__all__ = [
    "OtuTable",
    "RelAbundance",
    "branch_proportions",
    "load_otu_table",
    "to_relative",
    "gower_center",
    "kernel_projector",
    "project",
    "root_unifrac",
    "bootstrap_ci",
    "permutation_test",
    "AceComponents",
    "CohortStructure",
    "heritability",
    "normal_reml_fit",
    "wishart_fit",
    "wishart_fit_gower",
    "metric_mds",
    "nonmetric_mds",
    "pcoa",
    "PhyloTree",
    "branch_subset",
    "parse_newick",
    "read_newick",
]
