# hdivflow: H(div) conforming divergence-free flow solver package
