"""Stochastic networks whose predictive variance vanishes with width.

Library layout:

* numkit     -- float64 linear algebra, counter-based random streams, finite differences
* blocks     -- dense blocks, width embedding, dropout and encoder stochastic blocks
* training   -- stochastic/prior/ELBO objectives, exact backprop, SGD/Adam
* widthlift  -- width-lifting constructions and their certification
* analysis   -- Monte-Carlo variance reports and power-law slope fits
* experiments, figures, cli -- the varwidth command-line drivers
"""

__version__ = "0.1.0"
